#include "sfda/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "sfda/checkpoint.hpp"
#include "sfda/error.hpp"
#include "sfda/memory_selftrain.hpp"
#include "sfda/metrics.hpp"
#include "sfda/ops.hpp"
#include "sfda/rng.hpp"
#include "sfda/tns_io.hpp"

namespace sfda {
namespace {

// SGD with heavy-ball momentum: v = mu * v + g, w -= lr * v. Parameters
// without a gradient this step are left untouched.
class Sgd {
 public:
  Sgd(std::vector<TensorPtr<float>> params, double lr, double momentum)
      : params_(std::move(params)), lr_(lr), momentum_(momentum) {
    for (const auto& p : params_) velocity_.emplace_back(p->numel(), 0.0f);
  }

  void zero_grad() {
    for (auto& p : params_) p->drop_grad();
  }

  void step() {
    const auto lr = static_cast<float>(lr_);
    const auto mu = static_cast<float>(momentum_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      if (!p.has_grad()) continue;
      auto w = p.data();
      auto g = p.grad();
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = mu * v[j] + g[j];
        w[j] -= lr * v[j];
      }
    }
  }

 private:
  std::vector<TensorPtr<float>> params_;
  std::vector<std::vector<float>> velocity_;
  double lr_, momentum_;
};

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed, Stream stream,
                                          std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  CounterRng rng(seed, stream_id(stream, epoch));
  rng.shuffle(idx);
  return idx;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::ofstream open_csv(const std::filesystem::path& path, const std::string& header) {
  std::ofstream os;
  if (path.empty()) return os;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  os.open(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << header << '\n';
  return os;
}

double mean_entropy(std::span<const float> probs, std::size_t pixels) {
  double acc = 0.0;
  for (float v : probs) {
    if (v > 0.0f) acc -= static_cast<double>(v) * std::log(static_cast<double>(v));
  }
  return pixels ? acc / static_cast<double>(pixels) : 0.0;
}

void check_adapt_config(const AdaptConfig& cfg) {
  if (cfg.batch < 2) throw ConfigError("adapt batch must be >= 2");
  if (cfg.history == 0) throw ConfigError("history length must be >= 1");
  if (cfg.epochs == 0) throw ConfigError("adapt epochs must be >= 1");
  auto keep_ok = [](double k) { return k > 0.0 && k <= 100.0; };
  if (!keep_ok(cfg.keep_start) || !keep_ok(cfg.keep_end)) {
    throw ConfigError("keep ratios must be in (0, 100]");
  }
  if (cfg.lambda_start < 0.0 || cfg.lambda_end < 0.0 || cfg.phi < 0.0) {
    throw ConfigError("loss weights must be >= 0");
  }
  if (!(cfg.emd.tau > 0.0) || cfg.emd.eta0 < 0.0 || cfg.emd.eta0 > 1.0) {
    throw ConfigError("EMD needs tau > 0 and eta0 in [0, 1]");
  }
  if (!(cfg.lr >= 0.0) || cfg.momentum < 0.0 || cfg.momentum >= 1.0) {
    throw ConfigError("optimizer needs lr >= 0 and momentum in [0, 1)");
  }
}

}  // namespace

double schedule_value(double start, double end, std::size_t epoch, std::size_t total) {
  if (total == 0) return end;
  if (epoch > total) throw ContractError("schedule epoch past the end");
  return start + (end - start) * static_cast<double>(epoch) / static_cast<double>(total);
}

const char* to_string(EvalNorm n) { return n == EvalNorm::kSource ? "source" : "target"; }

EvalNorm eval_norm_from_string(const std::string& s) {
  if (s == "source") return EvalNorm::kSource;
  if (s == "target") return EvalNorm::kTarget;
  throw ConfigError("unknown normalization '" + s + "' (source|target)");
}

Prediction predict(const Segmentor<float>& net, const Dataset& ds, EvalNorm norm,
                   std::size_t batch) {
  if (ds.size() == 0) throw DataError("predict: empty dataset");
  Segmentor<float> work = net.clone();
  const std::size_t classes = net.spec().classes;
  Prediction out;
  out.images = ds.size();
  out.classes = classes;
  out.height = ds.height;
  out.width = ds.width;
  const std::size_t plane = ds.height * ds.width;
  out.labels.resize(ds.size() * plane);
  out.probs.resize(ds.size() * classes * plane);

  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t min_batch = norm == EvalNorm::kTarget ? 2 : 1;
  if (norm == EvalNorm::kTarget && ds.size() < 2) {
    throw DataError("target-statistics evaluation needs >= 2 images");
  }
  ForwardOptions opts;
  opts.pass = norm == EvalNorm::kSource ? NormPass::kEval : NormPass::kAdapt;
  opts.eta = 0.0;
  for (const auto& chunk : partition_batches(order, batch, min_batch)) {
    SampleBatch sb = make_batch(ds, chunk);
    Tape<float> tape(false);
    auto fr = work.forward(tape, sb.images, opts);
    const auto p = fr.probs->data();
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      const std::size_t img = chunk[b];
      const float* src = p.data() + b * classes * plane;
      std::copy(src, src + classes * plane,
                out.probs.begin() + static_cast<std::ptrdiff_t>(img * classes * plane));
      for (std::size_t i = 0; i < plane; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c) {
          if (src[c * plane + i] > src[best * plane + i]) best = c;
        }
        out.labels[img * plane + i] = static_cast<std::uint8_t>(best);
      }
    }
  }
  return out;
}

EvalReport evaluate(const Prediction& pred, const Dataset& ds) {
  if (pred.images != ds.size() || pred.height != ds.height || pred.width != ds.width) {
    throw ShapeError("evaluate: prediction does not match the dataset");
  }
  const std::size_t plane = ds.height * ds.width;
  std::vector<std::uint8_t> truth(ds.size() * plane);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::copy(ds.samples[i].mask.begin(), ds.samples[i].mask.end(),
              truth.begin() + static_cast<std::ptrdiff_t>(i * plane));
  }
  EvalReport r;
  r.dice.resize(pred.classes);
  r.hausdorff.assign(pred.classes, 0.0);
  for (std::size_t c = 0; c < pred.classes; ++c) {
    const auto cls = static_cast<std::uint8_t>(c);
    r.dice[c] = dice(pred.labels, truth, cls);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      std::span<const std::uint8_t> pl(pred.labels.data() + i * plane, plane);
      std::span<const std::uint8_t> tl(truth.data() + i * plane, plane);
      r.hausdorff[c] += hausdorff(pl, tl, ds.height, ds.width, cls);
    }
    r.hausdorff[c] /= static_cast<double>(ds.size());
  }
  for (std::size_t c = 1; c < pred.classes; ++c) {
    r.mean_fg_dice += r.dice[c];
    r.mean_fg_hausdorff += r.hausdorff[c];
  }
  if (pred.classes > 1) {
    r.mean_fg_dice /= static_cast<double>(pred.classes - 1);
    r.mean_fg_hausdorff /= static_cast<double>(pred.classes - 1);
  }
  r.mean_entropy = mean_entropy(pred.probs, pred.images * plane);
  return r;
}

EvalReport evaluate(const Segmentor<float>& net, const Dataset& ds, EvalNorm norm,
                    std::size_t batch) {
  return evaluate(predict(net, ds, norm, batch), ds);
}

Segmentor<float> train_source(const Dataset& source, const SegmentorSpec& spec,
                              const SourceTrainConfig& cfg, const SourceTrainOutputs& out) {
  if (cfg.batch < 2) throw ConfigError("source batch must be >= 2");
  if (source.size() < 2) throw DataError("source training needs >= 2 images");
  if (source.channels != spec.in_channels) {
    throw ShapeError("source images have " + std::to_string(source.channels) +
                     " channels, network expects " + std::to_string(spec.in_channels));
  }
  Segmentor<float> net(spec, cfg.seed);
  net.set_source_mode(BnMode::kSourceTrain);
  Sgd opt(net.parameters(), cfg.lr, cfg.momentum);
  auto curve = open_csv(out.curve_csv, "epoch,iter,loss");
  ForwardOptions opts;
  opts.pass = NormPass::kSourceTrain;
  opts.eta_track = cfg.eta_track;
  std::size_t iter = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled_indices(source.size(), cfg.seed, Stream::kSourceShuffle, epoch);
    for (const auto& chunk : partition_batches(order, cfg.batch)) {
      SampleBatch sb = make_batch(source, chunk);
      Tape<float> tape;
      auto fr = net.forward(tape, sb.images, opts);
      auto loss = cross_entropy_pixelwise(tape, fr.logits, sb.masks);
      const double value = loss->item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite source loss at epoch " + std::to_string(epoch) +
                           ", iteration " + std::to_string(iter));
      }
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
      if (curve.is_open()) curve << epoch << ',' << iter << ',' << fmt(value) << '\n';
      ++iter;
    }
  }
  net.set_source_mode(BnMode::kSourceEval);
  net.snapshot_source();
  return net;
}

AdaptResult adapt(const Segmentor<float>& source_model, const Dataset& target,
                  const AdaptConfig& cfg, const AdaptOutputs& out, const Dataset* validation) {
  check_adapt_config(cfg);
  if (!source_model.has_snapshot()) {
    throw ContractError("adapt needs a checkpoint with a source snapshot");
  }
  if (target.size() < 2) throw DataError("adaptation needs >= 2 target images");
  AdaptResult res{source_model.clone(), {}, {}, 0};
  Segmentor<float>& net = res.network;
  const std::size_t classes = net.spec().classes;
  const std::size_t plane = target.height * target.width;
  PredictionHistory history(cfg.history, classes, target.height, target.width);
  Sgd opt(net.parameters(), cfg.lr, cfg.momentum);

  std::string header = "epoch,iter,eta_t,lambda,phi,alpha_keep,loss_hbs,loss_se,loss_mcst,loss_total";
  for (std::size_t c = 0; c < classes; ++c) header += ",kept_frac_" + std::to_string(c);
  header += ",mean_psi";
  auto metrics = open_csv(out.metrics_csv, header);
  auto channels = open_csv(out.channel_csv, "iter,layer,channel,d,alpha,gamma_src,gamma_t");

  ScalingWeight weighting = ScalingWeight::kNone;
  if (cfg.use_scaling_adjust) {
    weighting = cfg.abs_gamma_weight ? ScalingWeight::kExpNegAbsGamma : ScalingWeight::kExpNegGamma;
  }
  const std::size_t total_channels = net.total_bn_channels();
  const std::vector<double> unit_alpha(total_channels, 1.0);

  std::uint64_t t = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lambda =
        cfg.use_se ? schedule_value(cfg.lambda_start, cfg.lambda_end, epoch, cfg.epochs) : 0.0;
    const double phi = cfg.use_mcsf ? cfg.phi : 0.0;
    const double keep = schedule_value(cfg.keep_start, cfg.keep_end, epoch, cfg.epochs);
    const auto order = shuffled_indices(target.size(), cfg.seed, Stream::kAdaptShuffle, epoch);
    std::vector<std::pair<std::string, std::vector<float>>> epoch_preds;
    double loss_sum = 0.0;
    std::size_t loss_n = 0;

    for (const auto& chunk : partition_batches(order, cfg.batch)) {
      const double eta = emd_momentum(t, cfg.emd);
      res.eta_trace.push_back(eta);
      SampleBatch sb = make_batch(target, chunk);

      // Expectation.
      Tape<float> tape;
      ForwardOptions opts;
      opts.pass = NormPass::kAdapt;
      opts.eta = eta;
      auto fr = net.forward(tape, sb.images, opts);
      auto& layers = net.bn_layers();

      // Classification, from the Expectation probabilities.
      PseudoLabelBatch plb;
      plb.classes = classes;
      plb.keep_ratio = keep;
      plb.thresholds = class_thresholds(*fr.probs, keep);
      plb.labels = pseudo_labels(*fr.probs, plb.thresholds);
      plb.psi = batch_consistency(*fr.probs, sb.ids, history);
      const auto kept = kept_fraction(*fr.probs, plb.labels);
      double mean_psi = 0.0;
      for (double v : plb.psi) mean_psi += v;
      mean_psi /= static_cast<double>(plb.psi.size());

      // Maximization.
      const auto tr = compute_transferability<float>(layers);
      const auto& alpha = cfg.use_adaptive_channels ? tr.alpha : unit_alpha;
      auto l_hbs = hbs_loss<float>(tape, layers, alpha, weighting);
      auto total = l_hbs;
      Tape<float> passive(false);
      double v_se = self_entropy_loss(passive, fr.probs)->item();
      double v_mcst = 0.0;
      if (lambda > 0.0) {
        auto l_se = self_entropy_loss(tape, fr.probs);
        total = add(tape, total, scale(tape, l_se, lambda));
      }
      if (phi > 0.0) {
        auto l_mcst = mcst_loss(tape, fr.probs, plb);
        v_mcst = l_mcst->item();
        total = add(tape, total, scale(tape, l_mcst, phi));
      } else {
        v_mcst = mcst_loss(passive, fr.probs, plb)->item();
      }
      const double v_hbs = l_hbs->item();
      const double v_total = total->item();
      // A NaN prediction can hide behind a finite loss when its pixels are
      // abstained and the entropy term is off.
      const bool probs_finite = std::all_of(fr.probs->data().begin(), fr.probs->data().end(),
                                            [](float v) { return std::isfinite(v); });
      if (!std::isfinite(v_total) || !probs_finite) {
        std::string what = std::string(probs_finite ? "non-finite adaptation loss"
                                                    : "non-finite predictions") +
                           " at epoch " + std::to_string(epoch) +
                           ", iteration " + std::to_string(t) + " (hbs " + fmt(v_hbs) +
                           ", se " + fmt(v_se) + ", mcst " + fmt(v_mcst) + ")";
        if (!out.dump_dir.empty()) {
          std::filesystem::create_directories(out.dump_dir);
          save_checkpoint(out.dump_dir / "nonfinite.ckpt", net);
          std::ofstream(out.dump_dir / "nonfinite.txt") << what << '\n';
          what += "; state dumped to " + out.dump_dir.string();
        }
        throw NumericError(what);
      }
      opt.zero_grad();
      tape.backward(total);
      opt.step();

      if (metrics.is_open()) {
        metrics << epoch << ',' << t << ',' << fmt(eta) << ',' << fmt(lambda) << ','
                << fmt(phi) << ',' << fmt(keep) << ',' << fmt(v_hbs) << ',' << fmt(v_se)
                << ',' << fmt(v_mcst) << ',' << fmt(v_total);
        for (double k : kept) metrics << ',' << fmt(k);
        metrics << ',' << fmt(mean_psi) << '\n';
      }
      if (channels.is_open()) {
        std::size_t flat = 0;
        for (std::size_t l = 0; l < layers.size(); ++l) {
          for (std::size_t c = 0; c < layers[l].channels(); ++c, ++flat) {
            channels << t << ',' << l << ',' << c << ',' << fmt(tr.d[flat]) << ','
                     << fmt(alpha[flat]) << ',' << fmt(layers[l].gamma_src()[c]) << ','
                     << fmt(layers[l].gamma()->data()[c]) << '\n';
          }
        }
      }

      const auto p = fr.probs->data();
      for (std::size_t b = 0; b < chunk.size(); ++b) {
        const float* src = p.data() + b * classes * plane;
        epoch_preds.emplace_back(sb.ids[b], std::vector<float>(src, src + classes * plane));
      }
      loss_sum += v_total;
      ++loss_n;
      net.advance();
      ++t;
    }

    // Each image's prediction from this epoch enters its memory queue.
    for (auto& [id, probs] : epoch_preds) {
      if (!out.history_dir.empty()) {
        const auto dir = out.history_dir / id;
        std::filesystem::create_directories(dir);
        Tensor snap(Shape{1, classes, target.height, target.width}, probs);
        save_tns(dir / (std::to_string(epoch) + ".tns"), TnsRecord::from_tensor(snap));
      }
      history.push(id, epoch, std::move(probs));
    }

    AdaptEpochLog log;
    log.epoch = epoch;
    log.lambda = lambda;
    log.phi = phi;
    log.keep = keep;
    log.mean_loss_total = loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0;
    if (validation) {
      log.validation_dice = evaluate(net, *validation, EvalNorm::kTarget, cfg.batch).mean_fg_dice;
    }
    res.epochs.push_back(log);
  }
  res.iterations = t;
  return res;
}

}  // namespace sfda
