#pragma once

// Synthetic segmentation domains: textured polygons on a textured background,
// one polygon type per class, with a controllable source -> target shift.

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace udanas {

using ImageArray = Eigen::ArrayXf;  // (C, H, W) row-major
using LabelArray = Eigen::ArrayXi;  // (H, W)

struct ShiftParams {
  double intensity = 0.0;      // added to every channel
  double hue_degrees = 0.0;    // rotation of RGB about the gray axis
  double texture_shift = 0.0;  // relative change of stripe frequency
  double size_shift = 0.0;     // relative change of polygon size
  double noise = 0.0;          // extra Gaussian noise sigma

  bool operator==(const ShiftParams&) const = default;
};

struct LabeledImage {
  ImageArray image;
  LabelArray label;
};

struct SynthOptions {
  std::uint64_t seed = 0;
  int n_source = 200;
  int n_target = 200;
  int n_target_eval = 100;
  int n_source_val = 50;
  int classes = 5;  // background + polygon classes
  int height = 64;
  int width = 64;
  ShiftParams shift;
};

struct DomainPair {
  std::vector<LabeledImage> source;
  std::vector<LabeledImage> source_val;
  std::vector<ImageArray> target_train;  // labels are never produced for this split
  std::vector<LabeledImage> target_eval;
  int num_classes = 0;
  int height = 0;
  int width = 0;
  int channels = 3;
};

/// Polygon type of each class; class 0 is background.
std::string class_name(int c);

/// Deterministic in `options.seed`; every image has its own derived stream.
DomainPair generate(const SynthOptions& options);

/// One image of a domain (exposed for tests and previews).
LabeledImage render_image(std::uint64_t image_seed, int classes, int height, int width, const ShiftParams& shift);

struct MiouResult {
  double mean = 0.0;
  std::vector<double> per_class;  // NaN for classes absent from both prediction and truth
};

/// IoU_c = TP / (TP + FP + FN); classes absent from both inputs are left out of the mean.
MiouResult miou(const LabelArray& pred, const LabelArray& truth, int num_classes);

/// Confusion counts accumulated over many images, for dataset-level mIoU.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);
  void add(const LabelArray& pred, const LabelArray& truth);
  MiouResult miou() const;
  const Eigen::MatrixXd& counts() const { return counts_; }  // rows truth, cols prediction

 private:
  Eigen::MatrixXd counts_;
};

std::string miou_csv(const MiouResult& r);

/// SHA-256 of the serialized splits, hex encoded.
std::string dataset_digest(const DomainPair& data);

/// Writes raw float32 / int32 arrays per split plus manifest.json.
void export_dataset(const DomainPair& data, const SynthOptions& options, const std::filesystem::path& dir);

nlohmann::json to_json(const ShiftParams& s);
ShiftParams shift_from_json(const nlohmann::json& j);

}  // namespace udanas
