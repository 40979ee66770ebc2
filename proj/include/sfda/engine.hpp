#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sfda/batchnorm.hpp"
#include "sfda/segnet.hpp"
#include "sfda/synthdata.hpp"
#include "sfda/transfer_losses.hpp"

namespace sfda {

struct SourceTrainConfig {
  std::size_t epochs = 30;
  std::size_t batch = 12;
  double lr = 0.05;
  double momentum = 0.9;
  double eta_track = 0.1;
  std::uint64_t seed = 0;
};

struct AdaptConfig {
  std::size_t batch = 12;
  std::size_t history = 5;
  EmdSchedule emd;
  double lambda_start = 10.0;
  double lambda_end = 0.0;
  double phi = 5.0;
  double keep_start = 20.0;
  double keep_end = 80.0;
  std::size_t epochs = 30;
  double lr = 1e-3;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  bool use_scaling_adjust = true;     // exp(-gamma_src) channel weight in HBS
  bool abs_gamma_weight = false;      // ... as exp(-|gamma_src|) instead
  bool use_adaptive_channels = true;  // transferability alpha; off means alpha = 1
  bool use_se = true;
  bool use_mcsf = true;
};

/// start + (end - start) * epoch / total; `end` when total is 0.
double schedule_value(double start, double end, std::size_t epoch, std::size_t total);

/// Normalization used at inference. kSource uses the running (source)
/// statistics; kTarget normalizes each evaluation batch by its own statistics.
enum class EvalNorm { kSource, kTarget };

const char* to_string(EvalNorm n);
EvalNorm eval_norm_from_string(const std::string& s);

struct Prediction {
  std::vector<std::uint8_t> labels;  // (images, H, W)
  std::vector<float> probs;          // (images, N, H, W)
  std::size_t images = 0, classes = 0, height = 0, width = 0;
};

/// Forward passes in contiguous batches of `batch` (a trailing single image is
/// merged into the previous batch for kTarget). The network is not modified.
Prediction predict(const Segmentor<float>& net, const Dataset& ds, EvalNorm norm,
                   std::size_t batch = 12);

struct EvalReport {
  std::vector<double> dice;       // per class, pooled over the whole set
  std::vector<double> hausdorff;  // per class, mean over images
  double mean_fg_dice = 0.0;
  double mean_fg_hausdorff = 0.0;
  double mean_entropy = 0.0;  // mean per-pixel entropy of the predictions
};

EvalReport evaluate(const Prediction& pred, const Dataset& ds);
EvalReport evaluate(const Segmentor<float>& net, const Dataset& ds, EvalNorm norm,
                    std::size_t batch = 12);

struct SourceTrainOutputs {
  std::filesystem::path curve_csv;  // epoch,iter,loss; empty to skip
};

/// Cross-entropy training on labelled source data followed by snapshot_source().
Segmentor<float> train_source(const Dataset& source, const SegmentorSpec& spec,
                              const SourceTrainConfig& cfg,
                              const SourceTrainOutputs& out = {});

struct AdaptOutputs {
  std::filesystem::path metrics_csv;  // one row per iteration
  std::filesystem::path channel_csv;  // iter,layer,channel,d,alpha,gamma_src,gamma_t
  std::filesystem::path history_dir;  // history/<id>/<epoch>.tns when set
  std::filesystem::path dump_dir;     // diagnostic dump on a non-finite loss
};

struct AdaptEpochLog {
  std::size_t epoch = 0;
  double lambda = 0.0, phi = 0.0, keep = 0.0;
  double mean_loss_total = 0.0;
  double validation_dice = -1.0;  // mean foreground DSC; -1 without a validation set
};

struct AdaptResult {
  Segmentor<float> network;
  std::vector<double> eta_trace;  // eta_t used at each iteration
  std::vector<AdaptEpochLog> epochs;
  std::size_t iterations = 0;
};

/// Source-free adaptation of a source checkpoint to unlabelled target images.
/// Each iteration runs Expectation (adapt-mode forward), Classification
/// (pseudo labels and memory weights) and Maximization (one optimizer step on
/// the weighted objective). Target masks are never read for training; the
/// optional validation set is evaluated once per epoch for monitoring only.
AdaptResult adapt(const Segmentor<float>& source_model, const Dataset& target,
                  const AdaptConfig& cfg, const AdaptOutputs& out = {},
                  const Dataset* validation = nullptr);

}  // namespace sfda
