#pragma once

#include <iomanip>

#include "tsubf/losses.hpp"
#include "tsubf/metrics.hpp"
#include "tsubf/network.hpp"

// Toy-scale training: Adam with decoupled-from-schedule L2 weight decay,
// per-step loss component logging, checkpointing at the best validation
// DSC, NaN diagnostics, and bit-exact resume (optimizer moments and RNG
// state are part of the saved state).

namespace tsubf {

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 3e-5;
};

template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  long long steps_taken() const { return t_; }

  void step(std::vector<ParamRef<T>>& params, Tape<T>& tape) {
    if (m_.empty()) {
      for (auto& p : params) {
        m_.emplace_back(static_cast<size_t>(p.tensor->size()), 0.0);
        v_.emplace_back(static_cast<size_t>(p.tensor->size()), 0.0);
      }
    }
    if (m_.size() != params.size())
      throw UsageError("Adam: parameter count changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      auto& w = *params[i].tensor;
      auto g = tape.grad_or_zero(w);
      for (long long k = 0; k < w.size(); ++k) {
        const double grad = static_cast<double>(g.data()[k]) +
                            cfg_.weight_decay * static_cast<double>(w.data()[k]);
        auto& m = m_[i][static_cast<size_t>(k)];
        auto& v = v_[i][static_cast<size_t>(k)];
        m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * grad;
        v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * grad * grad;
        const double update =
            cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        w.data()[k] -= static_cast<T>(update);
      }
    }
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("Adam::save: cannot open " + path);
    const long long n = static_cast<long long>(m_.size());
    os.write(reinterpret_cast<const char*>(&t_), sizeof(t_));
    os.write(reinterpret_cast<const char*>(&n), sizeof(n));
    for (long long i = 0; i < n; ++i) {
      const long long sz = static_cast<long long>(m_[static_cast<size_t>(i)].size());
      os.write(reinterpret_cast<const char*>(&sz), sizeof(sz));
      os.write(reinterpret_cast<const char*>(m_[static_cast<size_t>(i)].data()),
               sz * static_cast<long long>(sizeof(double)));
      os.write(reinterpret_cast<const char*>(v_[static_cast<size_t>(i)].data()),
               sz * static_cast<long long>(sizeof(double)));
    }
    if (!os) throw IoError("Adam::save: failed writing " + path);
  }

  void load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("Adam::load: cannot open " + path);
    long long n = 0;
    is.read(reinterpret_cast<char*>(&t_), sizeof(t_));
    is.read(reinterpret_cast<char*>(&n), sizeof(n));
    m_.assign(static_cast<size_t>(n), {});
    v_.assign(static_cast<size_t>(n), {});
    for (long long i = 0; i < n; ++i) {
      long long sz = 0;
      is.read(reinterpret_cast<char*>(&sz), sizeof(sz));
      if (!is || sz < 0) throw IoError("Adam::load: corrupt state " + path);
      m_[static_cast<size_t>(i)].resize(static_cast<size_t>(sz));
      v_[static_cast<size_t>(i)].resize(static_cast<size_t>(sz));
      is.read(reinterpret_cast<char*>(m_[static_cast<size_t>(i)].data()),
              sz * static_cast<long long>(sizeof(double)));
      is.read(reinterpret_cast<char*>(v_[static_cast<size_t>(i)].data()),
              sz * static_cast<long long>(sizeof(double)));
    }
    if (!is) throw IoError("Adam::load: corrupt state " + path);
  }

 private:
  AdamConfig cfg_;
  long long t_ = 0;
  // moments kept in double regardless of the model dtype
  std::vector<std::vector<double>> m_, v_;
};

struct TrainConfig {
  int max_steps = 500;
  int val_interval = 25;
  double early_stop_dsc = -1;  // stop once validation DSC reaches this; off if < 0
  std::uint64_t seed = 7;
  AdamConfig adam;
};

struct TrainLogRow {
  long long step = 0;
  double total = 0, dice_ce = 0, sobel = 0;
  double val_dsc = -1;  // -1 = no validation at this step
};

inline void write_train_csv(std::ostream& os,
                            const std::vector<TrainLogRow>& rows) {
  os << "step,total,dice_ce,sobel,val_dsc\n";
  os.precision(17);
  for (const auto& r : rows) {
    os << r.step << "," << r.total << "," << r.dice_ce << "," << r.sobel
       << ",";
    if (r.val_dsc >= 0) os << r.val_dsc;
    os << "\n";
  }
}

namespace detail {

template <class T>
Tensor<T> one_hot_target(const Tensor<int>& label, int num_classes) {
  Tensor<T> out({num_classes, label.dim(0), label.dim(1), label.dim(2)});
  const long long vox = label.size();
  for (long long i = 0; i < vox; ++i) {
    const int c = label.data()[i];
    if (c < 0 || c >= num_classes)
      throw DomainError("training label " + std::to_string(c) +
                        " outside [0," + std::to_string(num_classes) + ")");
    out.data()[c * vox + i] = T(1);
  }
  return out;
}

}  // namespace detail

// Mean foreground DSC of argmax predictions over a validation set.
template <class T>
double validate_dsc(const TsubfNet<T>& net,
                    const std::vector<VolumeSample>& val_set) {
  if (val_set.empty()) throw UsageError("validate_dsc: empty validation set");
  const int l = net.config().num_classes;
  double acc = 0;
  for (const auto& s : val_set) {
    if (!s.label) throw UsageError("validate_dsc: sample without label");
    Tensor<T> img({1, s.image.dim(0), s.image.dim(1), s.image.dim(2)});
    for (long long i = 0; i < s.image.size(); ++i)
      img.data()[i] = static_cast<T>(s.image.data()[i]);
    auto prob = sliding_window_infer(net, img);
    LabelVolume y{s.label->clone(), s.spacing};
    LabelVolume p{argmax_labels(prob), s.spacing};
    double per_vol = 0;
    for (int c = 1; c < l; ++c) per_vol += dsc(y, p, c);
    acc += per_vol / (l - 1);
  }
  return acc / static_cast<double>(val_set.size());
}

template <class T>
class Trainer {
 public:
  Trainer(TsubfNet<T>& net, TrainConfig cfg, LossConfig loss_cfg)
      : net_(net), cfg_(cfg), loss_(loss_cfg), adam_(cfg.adam),
        rng_(cfg.seed) {}

  long long step_count() const { return step_; }
  double best_val_dsc() const { return best_dsc_; }

  // Runs up to cfg.max_steps total steps (counting resumed ones). Samples
  // must be normalized and labeled. If out_dir is non-empty, the best
  // validation checkpoint and current train state are written there.
  std::vector<TrainLogRow> run(const std::vector<VolumeSample>& train_set,
                               const std::vector<VolumeSample>& val_set,
                               const std::string& out_dir = "") {
    if (train_set.empty()) throw UsageError("Trainer: empty training set");
    for (const auto* set : {&train_set, &val_set})
      for (const auto& s : *set) {
        if (s.units != Units::normalized)
          throw UsageError("Trainer: sample '" + s.source_id +
                           "' is not normalized");
        if (!s.label)
          throw UsageError("Trainer: sample '" + s.source_id +
                           "' has no label");
      }
    std::vector<TrainLogRow> rows;
    const Shape patch = net_.config().patch;
    const int l = net_.config().num_classes;
    while (step_ < cfg_.max_steps) {
      const auto& sample =
          train_set[static_cast<size_t>(rng_() % train_set.size())];
      auto origin = random_foreground_origin(sample, patch, rng_);
      auto cropped = extract_patch(sample, origin, patch);
      Tensor<T> img({1, patch[0], patch[1], patch[2]});
      for (long long i = 0; i < img.size(); ++i)
        img.data()[i] = static_cast<T>(cropped.image.data()[i]);
      auto target = detail::one_hot_target<T>(*cropped.label, l);

      Tape<T> tape;
      net_.watch_params(tape);
      auto prob = net_.forward(img);
      auto base = dice_ce_loss(flatten_classes(target, l),
                               flatten_classes(prob, l), loss_);
      auto sobel = sobel_loss(prob, loss_);
      auto total = loss_.lambda == 0 ? base : add(base, sobel);
      ++step_;
      if (!std::isfinite(static_cast<double>(total.item()))) {
        const std::string op = tape.first_non_finite_op();
        throw DomainError("training aborted at step " + std::to_string(step_) +
                          ": non-finite loss, first non-finite tensor from op '" +
                          (op.empty() ? "loss" : op) + "'");
      }
      tape.backward(total);
      auto params = net_.collect();
      adam_.step(params, tape);

      TrainLogRow row;
      row.step = step_;
      row.total = static_cast<double>(total.item());
      row.dice_ce = static_cast<double>(base.item());
      row.sobel = static_cast<double>(sobel.item());
      const bool last = step_ == cfg_.max_steps;
      if (!val_set.empty() &&
          (step_ % cfg_.val_interval == 0 || last)) {
        row.val_dsc = validate_dsc(net_, val_set);
        if (row.val_dsc > best_dsc_) {
          best_dsc_ = row.val_dsc;
          if (!out_dir.empty())
            save_checkpoint(net_, out_dir + "/best_checkpoint");
        }
      }
      rows.push_back(row);
      if (row.val_dsc >= 0 && cfg_.early_stop_dsc > 0 &&
          row.val_dsc >= cfg_.early_stop_dsc)
        break;
    }
    if (!out_dir.empty()) save_state(out_dir);
    return rows;
  }

  void save_state(const std::string& dir) {
    std::filesystem::create_directories(dir);
    save_checkpoint(net_, dir + "/last_checkpoint");
    adam_.save(dir + "/adam.bin");
    std::ofstream os(dir + "/train_state.txt");
    if (!os) throw IoError("Trainer: cannot write " + dir +
                           "/train_state.txt");
    os << "step " << step_ << "\n";
    os << "best_val_dsc " << std::setprecision(17) << best_dsc_ << "\n";
    os << "rng " << rng_ << "\n";
    if (!os) throw IoError("Trainer: failed writing " + dir +
                           "/train_state.txt");
  }

  void load_state(const std::string& dir) {
    load_checkpoint_into(net_, dir + "/last_checkpoint");
    adam_.load(dir + "/adam.bin");
    std::ifstream is(dir + "/train_state.txt");
    if (!is) throw IoError("Trainer: missing " + dir + "/train_state.txt");
    std::string key;
    if (!(is >> key >> step_) || key != "step")
      throw IoError("Trainer: corrupt train_state.txt in " + dir);
    if (!(is >> key >> best_dsc_) || key != "best_val_dsc")
      throw IoError("Trainer: corrupt train_state.txt in " + dir);
    if (!(is >> key) || key != "rng" || !(is >> rng_))
      throw IoError("Trainer: corrupt train_state.txt in " + dir);
  }

 private:
  static Tensor<T> flatten_classes(const Tensor<T>& t, int l) {
    const int v = static_cast<int>(t.size() / l);
    return permute(reshape(t, {l, v}), {1, 0});
  }

  TsubfNet<T>& net_;
  TrainConfig cfg_;
  LossConfig loss_;
  Adam<T> adam_;
  Rng rng_;
  long long step_ = 0;
  double best_dsc_ = -1;
};

}  // namespace tsubf
