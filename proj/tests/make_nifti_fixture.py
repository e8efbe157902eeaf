#!/usr/bin/env python3
"""Writes small NIfTI-1 fixture files for the reader tests.

Packs headers by hand from the published field layout so the C++ reader is
checked against an independent implementation.
"""
import struct
import sys
import os


def nifti_header(dims, datatype, bitpix, pixdim, vox_offset=352.0,
                 scl_slope=0.0, scl_inter=0.0, magic=b"n+1\x00"):
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)                      # sizeof_hdr
    dim = [len(dims)] + list(dims) + [1] * (7 - len(dims))
    struct.pack_into("<8h", hdr, 40, *dim)                   # dim
    struct.pack_into("<h", hdr, 70, datatype)                # datatype
    struct.pack_into("<h", hdr, 72, bitpix)                  # bitpix
    pd = [1.0] + list(pixdim) + [1.0] * (7 - len(pixdim))
    struct.pack_into("<8f", hdr, 76, *pd)                    # pixdim
    struct.pack_into("<f", hdr, 108, vox_offset)             # vox_offset
    struct.pack_into("<f", hdr, 112, scl_slope)              # scl_slope
    struct.pack_into("<f", hdr, 116, scl_inter)              # scl_inter
    hdr[344:348] = magic
    return bytes(hdr)


def write(path, header, payload):
    with open(path, "wb") as f:
        f.write(header)
        f.write(b"\x00" * 4)  # pad to vox_offset 352
        f.write(payload)


def main(outdir):
    os.makedirs(outdir, exist_ok=True)
    n = 4 * 4 * 4

    # i16 ramp 0..63, anisotropic spacing
    ramp = struct.pack("<%dh" % n, *range(n))
    write(os.path.join(outdir, "ramp.nii"),
          nifti_header((4, 4, 4), 4, 16, (1.5, 0.5, 2.0)), ramp)

    # f32 ramp with slope/intercept scaling
    vals = struct.pack("<%df" % n, *[float(i) for i in range(n)])
    write(os.path.join(outdir, "scaled.nii"),
          nifti_header((4, 4, 4), 16, 32, (1.0, 1.0, 1.0),
                       scl_slope=2.0, scl_inter=-1.0), vals)

    # detached-header magic
    write(os.path.join(outdir, "detached.nii"),
          nifti_header((4, 4, 4), 4, 16, (1.0, 1.0, 1.0),
                       magic=b"ni1\x00"), ramp)

    # unrecognized magic
    write(os.path.join(outdir, "badmagic.nii"),
          nifti_header((4, 4, 4), 4, 16, (1.0, 1.0, 1.0),
                       magic=b"xyz\x00"), ramp)

    # unsupported datatype (8 = int32)
    write(os.path.join(outdir, "baddtype.nii"),
          nifti_header((4, 4, 4), 8, 32, (1.0, 1.0, 1.0)), ramp)

    # payload cut short
    write(os.path.join(outdir, "truncated.nii"),
          nifti_header((4, 4, 4), 4, 16, (1.0, 1.0, 1.0)), ramp[: n])


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "nifti_fixtures")
