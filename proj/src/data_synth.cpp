#include "udanas/data_synth.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "udanas/digest.hpp"
#include "udanas/errors.hpp"
#include "udanas/rng.hpp"

namespace udanas {

namespace {

enum class Shape { disk, square, triangle, diamond, ring, cross, bar };

constexpr std::array<Shape, 7> kShapes{Shape::disk, Shape::square, Shape::triangle, Shape::diamond,
                                       Shape::ring, Shape::cross,  Shape::bar};
constexpr std::array<const char*, 7> kShapeNames{"disk", "square", "triangle", "diamond", "ring", "cross", "bar"};

constexpr std::array<std::array<float, 3>, 7> kPalette{{{0.85f, 0.25f, 0.20f},
                                                        {0.20f, 0.70f, 0.30f},
                                                        {0.25f, 0.35f, 0.85f},
                                                        {0.85f, 0.75f, 0.20f},
                                                        {0.75f, 0.30f, 0.75f},
                                                        {0.20f, 0.75f, 0.80f},
                                                        {0.90f, 0.55f, 0.15f}}};
constexpr std::array<float, 3> kBackground{0.45f, 0.44f, 0.42f};

// Stripe frequency (cycles per pixel) of each class's texture; background uses kBackgroundFreq.
constexpr std::array<double, 7> kStripeFreq{0.20, 0.12, 0.28, 0.16, 0.24, 0.10, 0.32};
constexpr double kBackgroundFreq = 0.06;
constexpr double kBaseNoise = 0.02;

bool inside(Shape shape, double u, double v, double r) {
  const double d = std::hypot(u, v);
  switch (shape) {
    case Shape::disk:
      return d <= r;
    case Shape::square:
      return std::abs(u) <= 0.8 * r && std::abs(v) <= 0.8 * r;
    case Shape::triangle: {
      // Equilateral triangle with circumradius r, apex along +v.
      const double s = std::sqrt(3.0);
      return v >= -0.5 * r && s * u + v <= r && -s * u + v <= r;
    }
    case Shape::diamond:
      return std::abs(u) + std::abs(v) <= r;
    case Shape::ring:
      return d <= r && d >= 0.55 * r;
    case Shape::cross:
      return (std::abs(u) <= 0.3 * r && std::abs(v) <= r) || (std::abs(v) <= 0.3 * r && std::abs(u) <= r);
    case Shape::bar:
      return std::abs(u) <= r && std::abs(v) <= 0.35 * r;
  }
  return false;
}

Eigen::Matrix3f hue_rotation(double degrees) {
  const double t = degrees * M_PI / 180.0;
  const Eigen::Vector3d k = Eigen::Vector3d::Ones().normalized();
  Eigen::Matrix3d cross;
  cross << 0, -k.z(), k.y(), k.z(), 0, -k.x(), -k.y(), k.x(), 0;
  const Eigen::Matrix3d r =
      std::cos(t) * Eigen::Matrix3d::Identity() + std::sin(t) * cross + (1 - std::cos(t)) * k * k.transpose();
  return r.cast<float>();
}

void write_raw(const std::filesystem::path& path, const void* data, std::size_t bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw Error("cannot write " + path.string());
}

}  // namespace

std::string class_name(int c) {
  if (c == 0) return "background";
  const auto i = static_cast<std::size_t>(c - 1) % kShapes.size();
  std::string name = kShapeNames[i];
  if (c - 1 >= static_cast<int>(kShapes.size())) name += "_" + std::to_string((c - 1) / kShapes.size());
  return name;
}

LabeledImage render_image(std::uint64_t image_seed, int classes, int height, int width, const ShiftParams& shift) {
  Rng rng(image_seed);
  const int plane = height * width;
  LabeledImage out{ImageArray(3 * plane), LabelArray::Zero(plane)};

  auto stripes = [&](double freq) {
    return std::array<double, 3>{uniform(rng, 0, M_PI), uniform(rng, 0, 2 * M_PI),
                                 freq * (1.0 + shift.texture_shift) * 2 * M_PI};
  };
  auto stripe_value = [](const std::array<double, 3>& s, double x, double y) {
    return std::sin(s[2] * (x * std::cos(s[0]) + y * std::sin(s[0])) + s[1]);
  };

  std::array<float, 3> bg = kBackground;
  for (auto& c : bg) c += static_cast<float>(uniform(rng, -0.04, 0.04));
  const auto bg_stripes = stripes(kBackgroundFreq);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const float t = static_cast<float>(0.06 * stripe_value(bg_stripes, x, y));
      for (int c = 0; c < 3; ++c) out.image[c * plane + y * width + x] = bg[static_cast<std::size_t>(c)] + t;
    }

  const int shapes = 2 + uniform_index(rng, 3);
  const double extent = std::min(height, width);
  for (int s = 0; s < shapes; ++s) {
    const int cls = 1 + uniform_index(rng, classes - 1);
    const auto idx = static_cast<std::size_t>(cls - 1) % kShapes.size();
    const double cx = uniform(rng, 0, width), cy = uniform(rng, 0, height);
    const double r = uniform(rng, 0.12, 0.22) * extent * (1.0 + shift.size_shift);
    const double angle = uniform(rng, 0, 2 * M_PI);
    std::array<float, 3> color = kPalette[idx];
    for (auto& c : color) c += static_cast<float>(uniform(rng, -0.05, 0.05));
    const auto tex = stripes(kStripeFreq[idx]);
    const double ca = std::cos(angle), sa = std::sin(angle);
    const int y0 = std::max(0, static_cast<int>(cy - r - 1)), y1 = std::min(height - 1, static_cast<int>(cy + r + 1));
    const int x0 = std::max(0, static_cast<int>(cx - r - 1)), x1 = std::min(width - 1, static_cast<int>(cx + r + 1));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
        if (!inside(kShapes[idx], u, v, r)) continue;
        const float t = static_cast<float>(0.10 * stripe_value(tex, x, y));
        for (int c = 0; c < 3; ++c) out.image[c * plane + y * width + x] = color[static_cast<std::size_t>(c)] + t;
        out.label[y * width + x] = cls;
      }
  }

  const bool rotate = shift.hue_degrees != 0.0;
  const Eigen::Matrix3f rot = hue_rotation(shift.hue_degrees);
  const double sigma = kBaseNoise + shift.noise;
  for (int p = 0; p < plane; ++p) {
    Eigen::Vector3f rgb(out.image[p], out.image[plane + p], out.image[2 * plane + p]);
    if (rotate) rgb = rot * rgb;
    for (int c = 0; c < 3; ++c) {
      out.image[c * plane + p] =
          rgb[c] + static_cast<float>(shift.intensity) + static_cast<float>(sigma * standard_normal(rng));
    }
  }
  return out;
}

DomainPair generate(const SynthOptions& o) {
  if (o.classes < 2) throw Error("at least two classes are required");
  if (o.height < 1 || o.width < 1) throw Error("image dimensions must be positive");
  if (o.n_source < 0 || o.n_target < 0 || o.n_target_eval < 0 || o.n_source_val < 0) {
    throw Error("split sizes must be non-negative");
  }
  const ShiftParams none;
  DomainPair d;
  d.num_classes = o.classes;
  d.height = o.height;
  d.width = o.width;
  auto draw = [&](const char* stream, int i, const ShiftParams& shift) {
    return render_image(derive_seed(o.seed, stream, static_cast<std::uint64_t>(i)), o.classes, o.height, o.width,
                        shift);
  };
  for (int i = 0; i < o.n_source; ++i) d.source.push_back(draw("data/source", i, none));
  for (int i = 0; i < o.n_source_val; ++i) d.source_val.push_back(draw("data/source_val", i, none));
  for (int i = 0; i < o.n_target; ++i) d.target_train.push_back(draw("data/target", i, o.shift).image);
  for (int i = 0; i < o.n_target_eval; ++i) d.target_eval.push_back(draw("data/target_eval", i, o.shift));
  return d;
}

// ---------------------------------------------------------------------------

MiouResult miou(const LabelArray& pred, const LabelArray& truth, int num_classes) {
  ConfusionMatrix cm(num_classes);
  cm.add(pred, truth);
  return cm.miou();
}

ConfusionMatrix::ConfusionMatrix(int num_classes) : counts_(Eigen::MatrixXd::Zero(num_classes, num_classes)) {
  if (num_classes < 1) throw Error("num_classes must be positive");
}

void ConfusionMatrix::add(const LabelArray& pred, const LabelArray& truth) {
  if (pred.size() != truth.size()) throw Error("prediction and truth differ in size");
  const auto k = counts_.rows();
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    if (truth[i] < 0) continue;
    if (truth[i] >= k || pred[i] < 0 || pred[i] >= k) throw Error("label out of range in mIoU");
    counts_(truth[i], pred[i]) += 1;
  }
}

MiouResult ConfusionMatrix::miou() const {
  MiouResult r;
  const auto k = counts_.rows();
  double sum = 0;
  int used = 0;
  for (Eigen::Index c = 0; c < k; ++c) {
    const double tp = counts_(c, c);
    const double fn = counts_.row(c).sum() - tp;
    const double fp = counts_.col(c).sum() - tp;
    if (tp + fp + fn == 0) {
      r.per_class.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    r.per_class.push_back(tp / (tp + fp + fn));
    sum += r.per_class.back();
    ++used;
  }
  r.mean = used ? sum / used : 0.0;
  return r;
}

std::string miou_csv(const MiouResult& r) {
  std::ostringstream os;
  os << "class,iou\n";
  os.precision(6);
  os << std::fixed;
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    os << class_name(static_cast<int>(c)) << ',';
    if (std::isnan(r.per_class[c]))
      os << "";
    else
      os << r.per_class[c];
    os << '\n';
  }
  os << "mean," << r.mean << '\n';
  return os.str();
}

std::string dataset_digest(const DomainPair& d) {
  Sha256 h;
  const std::int32_t header[3] = {d.num_classes, d.height, d.width};
  h.update(header, sizeof header);
  auto add_labeled = [&](const std::vector<LabeledImage>& split) {
    for (const auto& s : split) {
      h.update(s.image.data(), static_cast<std::size_t>(s.image.size()) * sizeof(float));
      h.update(s.label.data(), static_cast<std::size_t>(s.label.size()) * sizeof(int));
    }
  };
  add_labeled(d.source);
  add_labeled(d.source_val);
  for (const auto& img : d.target_train) h.update(img.data(), static_cast<std::size_t>(img.size()) * sizeof(float));
  add_labeled(d.target_eval);
  return h.hex();
}

void export_dataset(const DomainPair& d, const SynthOptions& o, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto dump_labeled = [&](const std::string& name, const std::vector<LabeledImage>& split) {
    std::vector<float> images;
    std::vector<std::int32_t> labels;
    for (const auto& s : split) {
      images.insert(images.end(), s.image.data(), s.image.data() + s.image.size());
      labels.insert(labels.end(), s.label.data(), s.label.data() + s.label.size());
    }
    write_raw(dir / (name + "_images.f32"), images.data(), images.size() * sizeof(float));
    write_raw(dir / (name + "_labels.i32"), labels.data(), labels.size() * sizeof(std::int32_t));
  };
  dump_labeled("source", d.source);
  dump_labeled("source_val", d.source_val);
  dump_labeled("target_eval", d.target_eval);
  std::vector<float> target;
  for (const auto& img : d.target_train) target.insert(target.end(), img.data(), img.data() + img.size());
  write_raw(dir / "target_train_images.f32", target.data(), target.size() * sizeof(float));

  const nlohmann::json manifest{
      {"seed", o.seed},
      {"shift", to_json(o.shift)},
      {"counts",
       {{"source", d.source.size()},
        {"source_val", d.source_val.size()},
        {"target_train", d.target_train.size()},
        {"target_eval", d.target_eval.size()}}},
      {"num_classes", d.num_classes},
      {"image_shape", {d.channels, d.height, d.width}},
      {"layout", "images float32 (N, C, H, W); labels int32 (N, H, W)"},
      {"digest", dataset_digest(d)}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

nlohmann::json to_json(const ShiftParams& s) {
  return {{"intensity", s.intensity},
          {"hue_degrees", s.hue_degrees},
          {"texture_shift", s.texture_shift},
          {"size_shift", s.size_shift},
          {"noise", s.noise}};
}

ShiftParams shift_from_json(const nlohmann::json& j) {
  ShiftParams s;
  s.intensity = j.value("intensity", 0.0);
  s.hue_degrees = j.value("hue_degrees", 0.0);
  s.texture_shift = j.value("texture_shift", 0.0);
  s.size_shift = j.value("size_shift", 0.0);
  s.noise = j.value("noise", 0.0);
  for (double v : {s.intensity, s.hue_degrees, s.texture_shift, s.size_shift, s.noise}) {
    if (!std::isfinite(v)) throw ConfigError("shift parameters must be finite");
  }
  return s;
}

}  // namespace udanas
