#pragma once

#include <fstream>
#include <optional>

#include "tsubf/bscf.hpp"
#include "tsubf/tsp.hpp"
#include "tsubf/volume_io.hpp"

// Full network assembly: patch embedding, four encoder stages (conv + TSP)
// with three downsamples, a mirrored decoder whose four skip fusions all use
// BSCF (three after upsampling, one at the embedding resolution), and a head
// of two stride-2 transposed convs plus a 1x1x1 classifier with softmax.
// Also: analytic FLOPs, sliding-window inference, checkpoint serialization.

namespace tsubf {

struct ModelConfig {
  int input_channels = 1;
  int num_classes = 2;
  std::array<int, 4> schedule{32, 64, 128, 256};
  Shape patch{192, 192, 64};
  int blocks_per_stage = 1;
  bool tsp_residual = true;
  bool bscf_residual = true;
  bool decoder_tsp = true;
  double lambda = 0.1;
  std::uint64_t seed = 7;

  void validate() const {
    if (input_channels < 1) throw ConfigError("config: input_channels < 1");
    if (num_classes < 2) throw ConfigError("config: num_classes < 2");
    for (int c : schedule)
      if (c < 4 || c % 4 != 0)
        throw ConfigError("config: channel count " + std::to_string(c) +
                          " must be a positive multiple of 4");
    if (patch.size() != 3) throw ConfigError("config: patch needs 3 extents");
    for (int p : patch)
      if (p <= 0 || p % 64 != 0)
        throw ConfigError("config: patch extent " + std::to_string(p) +
                          " must be a positive multiple of 64");
    if (blocks_per_stage < 1) throw ConfigError("config: blocks_per_stage < 1");
    if (lambda < 0) throw ConfigError("config: lambda must be >= 0");
  }
};

inline void write_model_config(std::ostream& os, const ModelConfig& c) {
  os.precision(17);
  os << "input_channels " << c.input_channels << "\n"
     << "num_classes " << c.num_classes << "\n"
     << "schedule " << c.schedule[0] << " " << c.schedule[1] << " "
     << c.schedule[2] << " " << c.schedule[3] << "\n"
     << "patch " << c.patch[0] << " " << c.patch[1] << " " << c.patch[2]
     << "\n"
     << "blocks_per_stage " << c.blocks_per_stage << "\n"
     << "tsp_residual " << c.tsp_residual << "\n"
     << "bscf_residual " << c.bscf_residual << "\n"
     << "decoder_tsp " << c.decoder_tsp << "\n"
     << "lambda " << c.lambda << "\n"
     << "seed " << c.seed << "\n";
}

inline ModelConfig parse_model_config(std::istream& is) {
  ModelConfig c;
  std::string key;
  while (is >> key) {
    if (key == "input_channels") is >> c.input_channels;
    else if (key == "num_classes") is >> c.num_classes;
    else if (key == "schedule")
      is >> c.schedule[0] >> c.schedule[1] >> c.schedule[2] >> c.schedule[3];
    else if (key == "patch") is >> c.patch[0] >> c.patch[1] >> c.patch[2];
    else if (key == "blocks_per_stage") is >> c.blocks_per_stage;
    else if (key == "tsp_residual") is >> c.tsp_residual;
    else if (key == "bscf_residual") is >> c.bscf_residual;
    else if (key == "decoder_tsp") is >> c.decoder_tsp;
    else if (key == "lambda") is >> c.lambda;
    else if (key == "seed") is >> c.seed;
    else throw ConfigError("config: unknown key '" + key + "'");
    if (!is) throw ConfigError("config: malformed value for '" + key + "'");
  }
  c.validate();
  return c;
}

// One resolution level: conv blocks followed by an optional TSP block.
template <class T>
struct NetStage {
  std::vector<ConvBlock<T>> convs;
  std::optional<TspParams<T>> tsp;

  NetStage() = default;
  NetStage(int c_in, int c_out, int blocks, bool with_tsp, bool tsp_residual,
           Rng& rng) {
    for (int b = 0; b < blocks; ++b)
      convs.emplace_back(b == 0 ? c_in : c_out, c_out, 3, 1, rng);
    if (with_tsp) tsp.emplace(c_out, rng, tsp_residual);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    auto y = x;
    for (const auto& c : convs) y = c.forward(y);
    if (tsp) y = tsp->forward(y);
    return y;
  }

  long long flops(const Shape& sp) const {
    long long f = 0;
    for (const auto& c : convs) f += c.flops(sp);
    if (tsp) f += tsp->flops(sp);
    return f;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    for (size_t i = 0; i < convs.size(); ++i)
      convs[i].collect(prefix + ".conv" + std::to_string(i), out);
    if (tsp) tsp->collect(prefix + ".tsp", out);
  }
};

template <class T>
class TsubfNet {
 public:
  explicit TsubfNet(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const auto& s = cfg.schedule;
    embed_ = PatchEmbedding<T>(cfg.input_channels, s[0], rng);
    for (int i = 0; i < 4; ++i)
      enc_.emplace_back(s[static_cast<size_t>(i)], s[static_cast<size_t>(i)],
                        cfg.blocks_per_stage, true, cfg.tsp_residual, rng);
    for (int i = 0; i < 3; ++i)
      downs_.emplace_back(s[static_cast<size_t>(i)],
                          s[static_cast<size_t>(i + 1)], rng);
    for (int i = 0; i < 3; ++i)
      ups_.emplace_back(s[static_cast<size_t>(3 - i)],
                        s[static_cast<size_t>(2 - i)], rng);
    for (int i = 0; i < 4; ++i)
      bscfs_.emplace_back(s[static_cast<size_t>(i < 3 ? 2 - i : 0)], rng,
                          cfg.bscf_residual);
    for (int i = 0; i < 4; ++i) {
      const int c = s[static_cast<size_t>(i < 3 ? 2 - i : 0)];
      dec_.emplace_back(c, c, cfg.blocks_per_stage, cfg.decoder_tsp,
                        cfg.tsp_residual, rng);
    }
    head_up_a_ = UpsampleStage<T>(s[0], s[0], rng);
    head_up_b_ = UpsampleStage<T>(s[0], s[0], rng);
    head_conv_ = ConvBlock<T>(s[0], cfg.num_classes, 1, 1, rng, false);
  }

  const ModelConfig& config() const { return cfg_; }

  // x: [C_img, H, W, D] with every spatial extent a multiple of 64.
  // Returns per-voxel class probabilities [l, H, W, D].
  Tensor<T> forward(const Tensor<T>& x) const {
    check_input(x.shape());
    auto e0 = embed_.forward(x);  // [C1, H/4]
    auto s1 = enc_[0].forward(e0);
    auto s2 = enc_[1].forward(downs_[0].forward(s1));
    auto s3 = enc_[2].forward(downs_[1].forward(s2));
    auto b = enc_[3].forward(downs_[2].forward(s3));  // [C4, H/32]
    auto f = dec_[0].forward(bscfs_[0].forward(ups_[0].forward(b), s3));
    f = dec_[1].forward(bscfs_[1].forward(ups_[1].forward(f), s2));
    f = dec_[2].forward(bscfs_[2].forward(ups_[2].forward(f), s1));
    f = dec_[3].forward(bscfs_[3].forward(f, e0));  // embedding-level skip
    auto h = head_up_b_.forward(head_up_a_.forward(f));
    return softmax(head_conv_.forward(h), 0);
  }

  long long count_flops(const Shape& spatial) const {
    check_input({cfg_.input_channels, spatial[0], spatial[1], spatial[2]});
    auto quarter = [](const Shape& sp) {
      return Shape{sp[0] / 4, sp[1] / 4, sp[2] / 4};
    };
    auto half = [](const Shape& sp) {
      return Shape{sp[0] / 2, sp[1] / 2, sp[2] / 2};
    };
    long long f = embed_.flops(spatial);
    Shape sp = quarter(spatial);
    const Shape sp4 = sp;
    f += enc_[0].flops(sp);
    f += downs_[0].flops(sp);
    sp = half(sp);
    f += enc_[1].flops(sp);
    f += downs_[1].flops(sp);
    sp = half(sp);
    f += enc_[2].flops(sp);
    f += downs_[2].flops(sp);
    sp = half(sp);
    f += enc_[3].flops(sp);
    for (int i = 0; i < 3; ++i) {
      f += ups_[static_cast<size_t>(i)].flops(sp);
      sp = {sp[0] * 2, sp[1] * 2, sp[2] * 2};
      f += bscfs_[static_cast<size_t>(i)].flops(sp);
      f += dec_[static_cast<size_t>(i)].flops(sp);
    }
    f += bscfs_[3].flops(sp4) + dec_[3].flops(sp4);
    f += head_up_a_.flops(sp4);
    Shape hp = {sp4[0] * 2, sp4[1] * 2, sp4[2] * 2};
    f += head_up_b_.flops(hp);
    f += head_conv_.flops(spatial);
    return f;
  }

  std::vector<ParamRef<T>> collect() {
    std::vector<ParamRef<T>> out;
    embed_.collect("embed", out);
    for (int i = 0; i < 4; ++i)
      enc_[static_cast<size_t>(i)].collect("enc" + std::to_string(i), out);
    for (int i = 0; i < 3; ++i)
      downs_[static_cast<size_t>(i)].collect("down" + std::to_string(i), out);
    for (int i = 0; i < 3; ++i)
      ups_[static_cast<size_t>(i)].collect("up" + std::to_string(i), out);
    for (int i = 0; i < 4; ++i)
      bscfs_[static_cast<size_t>(i)].collect("bscf" + std::to_string(i), out);
    for (int i = 0; i < 4; ++i)
      dec_[static_cast<size_t>(i)].collect("dec" + std::to_string(i), out);
    head_up_a_.collect("head_up_a", out);
    head_up_b_.collect("head_up_b", out);
    head_conv_.collect("head_conv", out);
    return out;
  }

  // Registers every parameter on the tape so forward passes record gradients.
  void watch_params(Tape<T>& tape) {
    for (auto& p : collect()) tape.watch(*p.tensor);
  }

 private:
  void check_input(const Shape& s) const {
    if (s.size() != 4 || s[0] != cfg_.input_channels)
      throw ConfigError("forward: expected [" +
                        std::to_string(cfg_.input_channels) +
                        ",H,W,D], got " + shape_str(s));
    for (int a = 1; a <= 3; ++a)
      if (s[static_cast<size_t>(a)] % 64 != 0)
        throw ConfigError("forward: spatial extent " +
                          std::to_string(s[static_cast<size_t>(a)]) +
                          " is not a multiple of 64");
  }

  ModelConfig cfg_;
  PatchEmbedding<T> embed_;
  std::vector<NetStage<T>> enc_, dec_;
  std::vector<DownsampleStage<T>> downs_;
  std::vector<UpsampleStage<T>> ups_;
  std::vector<BscfParams<T>> bscfs_;
  UpsampleStage<T> head_up_a_, head_up_b_;
  ConvBlock<T> head_conv_;
};

// Per-voxel argmax over the class axis of [l, H, W, D].
template <class T>
Tensor<int> argmax_labels(const Tensor<T>& prob) {
  if (prob.ndim() != 4)
    throw ShapeError("argmax_labels: expected [l,H,W,D], got " +
                     shape_str(prob.shape()));
  const int l = prob.dim(0);
  const long long vox = prob.size() / l;
  Tensor<int> out({prob.dim(1), prob.dim(2), prob.dim(3)});
  for (long long v = 0; v < vox; ++v) {
    int best = 0;
    for (int c = 1; c < l; ++c)
      if (prob.data()[c * vox + v] > prob.data()[best * vox + v]) best = c;
    out.data()[v] = best;
  }
  return out;
}

// Half-patch-overlap tiling over the zero-padded volume, uniform averaging
// of overlapping predictions, cropped back to the input size.
template <class T>
Tensor<T> sliding_window_infer(const TsubfNet<T>& net, const Tensor<T>& vol) {
  const auto& cfg = net.config();
  if (vol.ndim() != 4 || vol.dim(0) != cfg.input_channels)
    throw ConfigError("sliding_window_infer: expected [" +
                      std::to_string(cfg.input_channels) + ",H,W,D], got " +
                      shape_str(vol.shape()));
  const Shape size = cfg.patch;
  const Shape dims = {vol.dim(1), vol.dim(2), vol.dim(3)};
  const int l = cfg.num_classes;
  Tensor<T> acc({l, dims[0], dims[1], dims[2]});
  Tensor<T> count({dims[0], dims[1], dims[2]});
  const long long vox_out = numel(dims);
  for (const auto& o : grid_origins(dims, size)) {
    Tensor<T> patch({cfg.input_channels, size[0], size[1], size[2]});
    for (int c = 0; c < cfg.input_channels; ++c)
      for (int x = 0; x < size[0]; ++x)
        for (int y = 0; y < size[1]; ++y)
          for (int z = 0; z < size[2]; ++z) {
            const int sx = o[0] + x, sy = o[1] + y, sz = o[2] + z;
            const bool in =
                sx < dims[0] && sy < dims[1] && sz < dims[2];
            patch.data()[((static_cast<long long>(c) * size[0] + x) * size[1] +
                          y) * size[2] + z] =
                in ? vol.data()[((static_cast<long long>(c) * dims[0] + sx) *
                                     dims[1] + sy) * dims[2] + sz]
                   : T(0);
          }
    auto prob = net.forward(patch);
    for (int x = 0; x < size[0]; ++x) {
      if (o[0] + x >= dims[0]) break;
      for (int y = 0; y < size[1]; ++y) {
        if (o[1] + y >= dims[1]) break;
        for (int z = 0; z < size[2]; ++z) {
          if (o[2] + z >= dims[2]) break;
          const long long dst =
              (static_cast<long long>(o[0] + x) * dims[1] + o[1] + y) *
                  dims[2] + o[2] + z;
          const long long src =
              (static_cast<long long>(x) * size[1] + y) * size[2] + z;
          for (int c = 0; c < l; ++c)
            acc.data()[c * vox_out + dst] +=
                prob.data()[c * numel(size) + src];
          count.data()[dst] += T(1);
        }
      }
    }
  }
  for (int c = 0; c < l; ++c)
    for (long long v = 0; v < vox_out; ++v)
      acc.data()[c * vox_out + v] /= count.data()[v];
  return acc;
}

// ---- checkpoints: "<dir>/manifest.txt" + "<dir>/params.raw" ----

namespace detail {

template <class T>
struct CheckpointDtype;
template <>
struct CheckpointDtype<float> {
  static constexpr const char* name = "f32";
};
template <>
struct CheckpointDtype<double> {
  static constexpr const char* name = "f64";
};

}  // namespace detail

template <class T>
void save_checkpoint(TsubfNet<T>& m, const std::string& dir) {
  std::filesystem::create_directories(dir);
  auto params = m.collect();
  std::ofstream man(dir + "/manifest.txt");
  if (!man) throw IoError("save_checkpoint: cannot open " + dir +
                          "/manifest.txt");
  man << "tsubf-checkpoint 1\n";
  man << "dtype " << detail::CheckpointDtype<T>::name << "\n";
  man << "config_begin\n";
  write_model_config(man, m.config());
  man << "config_end\n";
  man << "params " << params.size() << "\n";
  long long offset = 0;
  std::ofstream raw(dir + "/params.raw", std::ios::binary);
  if (!raw) throw IoError("save_checkpoint: cannot open " + dir +
                          "/params.raw");
  for (auto& p : params) {
    man << p.name << " " << p.tensor->ndim();
    for (int d : p.tensor->shape()) man << " " << d;
    man << " " << offset << "\n";
    raw.write(reinterpret_cast<const char*>(p.tensor->data()),
              static_cast<std::streamsize>(p.tensor->size() * sizeof(T)));
    offset += p.tensor->size() * static_cast<long long>(sizeof(T));
  }
  man << "blob_bytes " << offset << "\n";
  if (!man || !raw)
    throw IoError("save_checkpoint: failed writing " + dir);
}

// Loads parameters into m; every name and shape must match m's layout.
template <class T>
void load_checkpoint_into(TsubfNet<T>& m, const std::string& dir) {
  std::ifstream man(dir + "/manifest.txt");
  if (!man) throw IoError("load_checkpoint: missing " + dir +
                          "/manifest.txt");
  std::string tag;
  int version = 0;
  man >> tag >> version;
  if (tag != "tsubf-checkpoint")
    throw IoError("load_checkpoint: corrupt manifest in " + dir);
  if (version != 1)
    throw IoError("load_checkpoint: unknown format version " +
                  std::to_string(version));
  std::string key, dtype;
  man >> key >> dtype;
  if (key != "dtype" || dtype != detail::CheckpointDtype<T>::name)
    throw IoError("load_checkpoint: checkpoint dtype " + dtype +
                  " does not match model dtype " +
                  detail::CheckpointDtype<T>::name);
  man >> key;
  if (key != "config_begin")
    throw IoError("load_checkpoint: corrupt manifest in " + dir);
  std::string cfg_text, line;
  std::getline(man, line);
  while (std::getline(man, line) && line != "config_end")
    cfg_text += line + "\n";
  size_t n = 0;
  if (!(man >> key >> n) || key != "params")
    throw IoError("load_checkpoint: corrupt manifest in " + dir);
  auto params = m.collect();
  if (n != params.size())
    throw IoError("load_checkpoint: manifest lists " + std::to_string(n) +
                  " parameters, model has " + std::to_string(params.size()));
  std::ifstream raw(dir + "/params.raw", std::ios::binary);
  if (!raw) throw IoError("load_checkpoint: missing " + dir + "/params.raw");
  for (auto& p : params) {
    std::string name;
    int ndim = 0;
    if (!(man >> name >> ndim))
      throw IoError("load_checkpoint: corrupt manifest in " + dir);
    Shape shape(static_cast<size_t>(ndim));
    for (int a = 0; a < ndim; ++a) man >> shape[static_cast<size_t>(a)];
    long long offset = 0;
    man >> offset;
    if (!man) throw IoError("load_checkpoint: corrupt manifest in " + dir);
    if (name != p.name)
      throw IoError("load_checkpoint: parameter '" + name +
                    "' does not match model parameter '" + p.name + "'");
    if (shape != p.tensor->shape())
      throw IoError("load_checkpoint: parameter '" + name + "' has shape " +
                    shape_str(shape) + ", model expects " +
                    shape_str(p.tensor->shape()));
    raw.seekg(offset);
    raw.read(reinterpret_cast<char*>(p.tensor->data()),
             static_cast<std::streamsize>(p.tensor->size() * sizeof(T)));
    if (raw.gcount() !=
        static_cast<std::streamsize>(p.tensor->size() * sizeof(T)))
      throw IoError("load_checkpoint: truncated blob at parameter '" + name +
                    "'");
  }
}

// Rebuilds the model from the stored config snapshot, then loads weights.
template <class T>
TsubfNet<T> load_checkpoint(const std::string& dir) {
  std::ifstream man(dir + "/manifest.txt");
  if (!man) throw IoError("load_checkpoint: missing " + dir +
                          "/manifest.txt");
  std::string line, cfg_text;
  bool in_cfg = false, saw_cfg = false;
  while (std::getline(man, line)) {
    if (line == "config_begin") {
      in_cfg = true;
      saw_cfg = true;
      continue;
    }
    if (line == "config_end") break;
    if (in_cfg) cfg_text += line + "\n";
  }
  if (!saw_cfg)
    throw IoError("load_checkpoint: corrupt manifest in " + dir);
  std::istringstream cfg_is(cfg_text);
  TsubfNet<T> m(parse_model_config(cfg_is));
  load_checkpoint_into(m, dir);
  return m;
}

}  // namespace tsubf
