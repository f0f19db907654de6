/**
 * @file data.hpp
 * @brief Labeled image sets, on-disk dataset formats, the synthetic
 *        benchmark generator and session splitting.
 *
 * Formats:
 *  - CIFAR-100 binary: 3074-byte records = coarse label (1) + fine label (1)
 *    + 3072 pixel bytes (R, G, B planes of 32x32, row-major).
 *  - Raw-tensor directory: `manifest.txt` with key=value lines (count,
 *    channels, height, width, labels_file, data_file), a little-endian f32
 *    pixel file and a little-endian u16 label file.
 *  - Split file: `session <t> classes <ids...>` lines followed by
 *    `support <t> <train indices...>` lines for t >= 1.
 */
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fscil/random.hpp"
#include "fscil/tensor.hpp"

namespace fscil {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PlanError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LabeledImageSet {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;  // [count, C, H, W], values in [0, 1]
  std::vector<int> labels;
  std::vector<std::uint8_t> coarse_labels;  // CIFAR only; empty otherwise
  std::vector<std::string> class_names;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t image_size() const { return channels * height * width; }

  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * image_size(), image_size());
  }

  void push_back(std::span<const float> img, int label) {
    if (img.size() != image_size()) throw ShapeError("LabeledImageSet: image size mismatch");
    pixels.insert(pixels.end(), img.begin(), img.end());
    labels.push_back(label);
  }

  std::size_t num_classes() const {
    int mx = -1;
    for (int y : labels) mx = std::max(mx, y);
    return static_cast<std::size_t>(mx + 1);
  }

  LabeledImageSet empty_like() const {
    LabeledImageSet s;
    s.channels = channels;
    s.height = height;
    s.width = width;
    s.class_names = class_names;
    return s;
  }

  LabeledImageSet subset(std::span<const std::size_t> idx) const {
    LabeledImageSet s = empty_like();
    for (auto i : idx) s.push_back(image(i), labels.at(i));
    return s;
  }

  std::vector<std::size_t> indices_of(int cls) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cls) out.push_back(i);
    }
    return out;
  }

  template <typename T>
  Tensor<T> batch(std::span<const std::size_t> idx) const {
    std::vector<T> v;
    v.reserve(idx.size() * image_size());
    for (auto i : idx) {
      const auto img = image(i);
      v.insert(v.end(), img.begin(), img.end());
    }
    return Tensor<T>::from({idx.size(), channels, height, width}, std::move(v));
  }

  template <typename T>
  Tensor<T> all() const {
    std::vector<T> v(pixels.begin(), pixels.end());
    return Tensor<T>::from({size(), channels, height, width}, std::move(v));
  }
};

inline LabeledImageSet concat(const LabeledImageSet& a, const LabeledImageSet& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.image_size() != b.image_size()) throw ShapeError("concat: image shapes differ");
  LabeledImageSet out = a;
  out.coarse_labels.clear();
  out.pixels.insert(out.pixels.end(), b.pixels.begin(), b.pixels.end());
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

namespace detail {

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline constexpr std::size_t kCifarRecordBytes = 3074;
inline constexpr std::size_t kCifarSide = 32;

inline LabeledImageSet parse_cifar100_binary(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    const std::size_t offset = bytes.size() / kCifarRecordBytes * kCifarRecordBytes;
    throw FormatError("cifar100: truncated record at byte offset " + std::to_string(offset) + " (" +
                      std::to_string(bytes.size() - offset) + " of " +
                      std::to_string(kCifarRecordBytes) + " bytes)");
  }
  LabeledImageSet s;
  s.channels = 3;
  s.height = s.width = kCifarSide;
  const std::size_t count = bytes.size() / kCifarRecordBytes;
  s.pixels.reserve(count * 3072);
  for (std::size_t r = 0; r < count; ++r) {
    const auto rec = bytes.subspan(r * kCifarRecordBytes, kCifarRecordBytes);
    s.coarse_labels.push_back(rec[0]);
    s.labels.push_back(rec[1]);
    for (std::size_t i = 2; i < kCifarRecordBytes; ++i) s.pixels.push_back(static_cast<float>(rec[i]) / 255.0f);
  }
  return s;
}

inline LabeledImageSet load_cifar100_binary(const std::filesystem::path& path) {
  return parse_cifar100_binary(detail::read_bytes(path));
}

inline std::vector<std::uint8_t> encode_cifar100_binary(const LabeledImageSet& s) {
  if (!s.empty() && (s.channels != 3 || s.height != kCifarSide || s.width != kCifarSide)) {
    throw ShapeError("cifar100: images must be 3x32x32");
  }
  std::vector<std::uint8_t> out;
  out.reserve(s.size() * kCifarRecordBytes);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.labels[i] < 0 || s.labels[i] > 255) throw FormatError("cifar100: label does not fit a byte");
    out.push_back(s.coarse_labels.empty() ? 0 : s.coarse_labels[i]);
    out.push_back(static_cast<std::uint8_t>(s.labels[i]));
    for (float v : s.image(i)) {
      out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    }
  }
  return out;
}

inline void save_cifar100_binary(const LabeledImageSet& s, const std::filesystem::path& path) {
  detail::write_bytes(path, encode_cifar100_binary(s));
}

inline LabeledImageSet load_raw_tensor_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw FormatError("raw dataset: missing " + (dir / "manifest.txt").string());
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("raw dataset manifest line " + std::to_string(lineno) + ": expected key=value");
    }
    kv[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
  }
  for (const char* key : {"count", "channels", "height", "width", "labels_file", "data_file"}) {
    if (!kv.count(key)) throw FormatError(std::string("raw dataset manifest: missing key ") + key);
  }
  LabeledImageSet s;
  const std::size_t count = std::stoul(kv["count"]);
  s.channels = std::stoul(kv["channels"]);
  s.height = std::stoul(kv["height"]);
  s.width = std::stoul(kv["width"]);
  const auto data = detail::read_bytes(dir / kv["data_file"]);
  const auto labels = detail::read_bytes(dir / kv["labels_file"]);
  if (data.size() != count * s.image_size() * 4) {
    throw FormatError("raw dataset: data file has " + std::to_string(data.size()) + " bytes, expected " +
                      std::to_string(count * s.image_size() * 4));
  }
  if (labels.size() != count * 2) {
    throw FormatError("raw dataset: label file has " + std::to_string(labels.size()) + " bytes, expected " +
                      std::to_string(count * 2));
  }
  s.pixels.resize(count * s.image_size());
  std::memcpy(s.pixels.data(), data.data(), data.size());
  s.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    s.labels[i] = static_cast<int>(labels[2 * i] | (labels[2 * i + 1] << 8));
  }
  return s;
}

inline void save_raw_tensor_dataset(const LabeledImageSet& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream m(dir / "manifest.txt");
    m << "count=" << s.size() << "\nchannels=" << s.channels << "\nheight=" << s.height
      << "\nwidth=" << s.width << "\nlabels_file=labels.u16\ndata_file=data.f32\n";
  }
  std::vector<std::uint8_t> data(s.pixels.size() * 4);
  std::memcpy(data.data(), s.pixels.data(), data.size());
  detail::write_bytes(dir / "data.f32", data);
  std::vector<std::uint8_t> labels;
  for (int y : s.labels) {
    if (y < 0 || y > 0xFFFF) throw FormatError("raw dataset: label does not fit 16 bits");
    labels.push_back(static_cast<std::uint8_t>(y & 0xFF));
    labels.push_back(static_cast<std::uint8_t>((y >> 8) & 0xFF));
  }
  detail::write_bytes(dir / "labels.u16", labels);
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

/// Class template: an oriented colour grating with a coloured blob at the centre.
struct SyntheticClass {
  double orientation = 0.0;  // radians
  double frequency = 1.0;    // cycles per image side
  double phase = 0.0;
  std::array<double, 3> grating_amp{};
  std::array<double, 3> blob_color{};
  double blob_radius = 1.0;
};

struct SyntheticStyle {
  double noise = 0.05;       // uniform noise amplitude η
  std::size_t max_shift = 1;  // translation in pixels, each axis in [-s, s]
  bool random_pose = false;   // random quarter-turn and horizontal flip per sample
  bool clutter = false;       // class pattern only inside a central disc; random texture outside
};

/// Rotates a square [C, side, side] image by k quarter turns (counter-clockwise),
/// then mirrors it left-right when `flip` is set.
inline std::vector<float> dihedral_pose(const std::vector<float>& img, std::size_t side, unsigned k, bool flip) {
  const std::size_t area = side * side, channels = img.size() / area;
  std::vector<float> out(img.size());
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const std::size_t xf = flip ? side - 1 - x : x;
        std::size_t sy = y, sx = xf;  // source pixel for output (y, xf) after k turns
        for (unsigned r = 0; r < k % 4; ++r) {
          const std::size_t ny = sx, nx = side - 1 - sy;
          sy = ny;
          sx = nx;
        }
        out[c * area + y * side + x] = img[c * area + sy * side + sx];
      }
    }
  }
  return out;
}

inline std::vector<SyntheticClass> synthetic_classes(std::size_t num_classes, std::size_t side,
                                                     std::uint64_t seed) {
  Rng rng(seed, Purpose::data, 0);
  std::vector<SyntheticClass> out(num_classes);
  for (auto& c : out) {
    c.orientation = rng.uniform(0.0, std::numbers::pi);
    c.frequency = rng.uniform(1.0, 3.5);
    c.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (auto& a : c.grating_amp) a = rng.uniform(0.1, 0.45);
    for (auto& b : c.blob_color) b = rng.uniform(0.0, 1.0);
    c.blob_radius = rng.uniform(0.12, 0.25) * static_cast<double>(side);
  }
  return out;
}

/// Renders a class template translated by (dy, dx) pixels into [3, side, side].
/// With a `background`, pixels outside a disc of radius 0.3·side around the
/// (shifted) centre show the background's grating instead of the class pattern.
inline std::vector<float> render_synthetic(const SyntheticClass& c, std::size_t side, double dy, double dx,
                                           const SyntheticClass* background = nullptr) {
  std::vector<float> img(3 * side * side);
  const double centre = (static_cast<double>(side) - 1.0) / 2.0;
  const double kx = std::cos(c.orientation), ky = std::sin(c.orientation);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double px = static_cast<double>(x) - dx, py = static_cast<double>(y) - dy;
      const double wave = std::sin(2.0 * std::numbers::pi * c.frequency * (px * kx + py * ky) /
                                       static_cast<double>(side) + c.phase);
      const double d2 = (px - centre) * (px - centre) + (py - centre) * (py - centre);
      const double g = std::exp(-d2 / (2.0 * c.blob_radius * c.blob_radius));
      const double object_radius = 0.3 * static_cast<double>(side);
      const bool outside = background && d2 > object_radius * object_radius;
      double bg_wave = 0.0;
      if (outside) {
        const double bx = std::cos(background->orientation), by = std::sin(background->orientation);
        bg_wave = std::sin(2.0 * std::numbers::pi * background->frequency * (static_cast<double>(x) * bx +
                                                                             static_cast<double>(y) * by) /
                               static_cast<double>(side) +
                           background->phase);
      }
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = outside ? 0.5 + background->grating_amp[ch] * bg_wave
                                 : (1.0 - g) * (0.5 + c.grating_amp[ch] * wave) + g * c.blob_color[ch];
        img[(ch * side + y) * side + x] = static_cast<float>(v);
      }
    }
  }
  return img;
}

/// `per_class` samples of each class: template + random shift + uniform noise,
/// clamped to [0, 1]. `sample_stream` separates e.g. train from test draws.
inline LabeledImageSet generate_synthetic(std::size_t num_classes, std::size_t per_class, std::size_t side,
                                          std::uint64_t seed, SyntheticStyle style = {},
                                          std::uint32_t sample_stream = 1) {
  if (num_classes < 2) throw std::invalid_argument("generate_synthetic: num_classes must be >= 2");
  if (side < 2) throw std::invalid_argument("generate_synthetic: side must be >= 2");
  const auto classes = synthetic_classes(num_classes, side, seed);
  Rng rng(seed, Purpose::data, sample_stream);
  LabeledImageSet s;
  s.channels = 3;
  s.height = s.width = side;
  const auto shift = static_cast<std::int64_t>(style.max_shift);
  for (std::size_t k = 0; k < num_classes; ++k) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const auto dy = static_cast<double>(rng.uniform_int(-shift, shift));
      const auto dx = static_cast<double>(rng.uniform_int(-shift, shift));
      std::optional<SyntheticClass> bg;
      if (style.clutter) {
        bg.emplace();
        bg->orientation = rng.uniform(0.0, std::numbers::pi);
        bg->frequency = rng.uniform(1.0, 3.5);
        bg->phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        for (auto& a : bg->grating_amp) a = rng.uniform(0.1, 0.45);
      }
      auto img = render_synthetic(classes[k], side, dy, dx, bg ? &*bg : nullptr);
      if (style.random_pose) {
        const auto turns = static_cast<unsigned>(rng.uniform_int(0, 3));
        img = dihedral_pose(img, side, turns, rng.uniform_int(0, 1) == 1);
      }
      for (auto& v : img) {
        const double noise = style.noise > 0.0 ? rng.uniform(-style.noise, style.noise) : 0.0;
        v = static_cast<float>(std::clamp(static_cast<double>(v) + noise, 0.0, 1.0));
      }
      s.push_back(img, static_cast<int>(k));
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Session splitting

struct SessionSpec {
  std::size_t index = 0;
  std::vector<int> class_ids;
  LabeledImageSet support;
  LabeledImageSet query;
  std::vector<std::size_t> support_indices;  // into the source training set
};

struct SplitPlan {
  std::size_t base_classes = 60;
  std::size_t way = 5;
  std::size_t shot = 5;
  std::size_t sessions = 8;
  std::vector<int> class_order;  // empty = identity
  std::uint64_t sample_seed = 0;
};

/// Session 0 takes all training images of the first `base_classes` classes in
/// `class_order`; each later session takes the next `way` classes with `shot`
/// seeded-sampled training images each. Queries are each class's full test set.
inline std::vector<SessionSpec> split_sessions(const LabeledImageSet& train, const LabeledImageSet& test,
                                               const SplitPlan& plan) {
  const std::size_t total = std::max(train.num_classes(), test.num_classes());
  if (plan.way == 0) throw PlanError("split: way must be >= 1");
  if (plan.shot == 0) throw PlanError("split: shot must be >= 1");
  if (plan.base_classes == 0) throw PlanError("split: base_classes must be >= 1");
  const std::size_t needed = plan.base_classes + plan.way * plan.sessions;
  if (needed > total) {
    throw PlanError("split: base_classes + way*sessions = " + std::to_string(plan.base_classes) + " + " +
                    std::to_string(plan.way) + "*" + std::to_string(plan.sessions) + " = " +
                    std::to_string(needed) + " exceeds the " + std::to_string(total) + " available classes");
  }
  std::vector<int> order = plan.class_order;
  if (order.empty()) {
    for (std::size_t i = 0; i < total; ++i) order.push_back(static_cast<int>(i));
  }
  {
    std::vector<int> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted[i] != static_cast<int>(i) || sorted.size() != total) {
        throw PlanError("split: class_order is not a permutation of [0, " + std::to_string(total) + ")");
      }
    }
  }
  std::vector<SessionSpec> specs;
  std::size_t cursor = 0;
  for (std::size_t t = 0; t <= plan.sessions; ++t) {
    SessionSpec spec;
    spec.index = t;
    const std::size_t count = t == 0 ? plan.base_classes : plan.way;
    spec.class_ids.assign(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                          order.begin() + static_cast<std::ptrdiff_t>(cursor + count));
    cursor += count;
    Rng rng(plan.sample_seed, Purpose::sampling, static_cast<std::uint32_t>(1000 + t));
    for (int cls : spec.class_ids) {
      auto idx = train.indices_of(cls);
      if (t > 0) {
        if (idx.size() < plan.shot) {
          throw PlanError("split: class " + std::to_string(cls) + " has " + std::to_string(idx.size()) +
                          " training images, fewer than shot = " + std::to_string(plan.shot));
        }
        const auto perm = rng.permutation(idx.size());
        std::vector<std::size_t> chosen;
        for (std::size_t k = 0; k < plan.shot; ++k) chosen.push_back(idx[perm[k]]);
        idx = std::move(chosen);
      }
      spec.support_indices.insert(spec.support_indices.end(), idx.begin(), idx.end());
    }
    spec.support = train.subset(spec.support_indices);
    std::vector<std::size_t> q;
    for (int cls : spec.class_ids) {
      const auto idx = test.indices_of(cls);
      q.insert(q.end(), idx.begin(), idx.end());
    }
    spec.query = test.subset(q);
    specs.push_back(std::move(spec));
  }
  return specs;
}

struct SplitFile {
  std::vector<std::vector<int>> session_classes;
  std::vector<std::vector<std::size_t>> support;  // support[t] for t >= 1; support[0] unused
};

inline std::string format_split_file(const std::vector<SessionSpec>& specs) {
  std::ostringstream os;
  os << "# fscil split v1\n";
  for (const auto& s : specs) {
    os << "session " << s.index << " classes";
    for (int c : s.class_ids) os << ' ' << c;
    os << '\n';
  }
  for (const auto& s : specs) {
    if (s.index == 0) continue;
    os << "support " << s.index;
    for (auto i : s.support_indices) os << ' ' << i;
    os << '\n';
  }
  return os.str();
}

inline SplitFile parse_split_file(const std::string& text) {
  SplitFile f;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string kind;
    std::size_t t = 0;
    ls >> kind >> t;
    if (!ls) throw FormatError("split file line " + std::to_string(lineno) + ": malformed");
    if (kind == "session") {
      std::string word;
      ls >> word;
      if (word != "classes") throw FormatError("split file line " + std::to_string(lineno) + ": expected 'classes'");
      if (t != f.session_classes.size()) {
        throw FormatError("split file line " + std::to_string(lineno) + ": sessions must be listed in order");
      }
      std::vector<int> ids;
      for (int c; ls >> c;) ids.push_back(c);
      f.session_classes.push_back(std::move(ids));
    } else if (kind == "support") {
      if (f.support.size() <= t) f.support.resize(t + 1);
      for (std::size_t i; ls >> i;) f.support[t].push_back(i);
    } else {
      throw FormatError("split file line " + std::to_string(lineno) + ": unknown record '" + kind + "'");
    }
  }
  if (f.session_classes.empty()) throw FormatError("split file: no sessions");
  f.support.resize(f.session_classes.size());
  return f;
}

/// Builds sessions from an explicit split file (exact external splits).
inline std::vector<SessionSpec> split_sessions_from_file(const LabeledImageSet& train, const LabeledImageSet& test,
                                                         const SplitFile& file) {
  std::set<int> seen;
  std::vector<SessionSpec> specs;
  for (std::size_t t = 0; t < file.session_classes.size(); ++t) {
    SessionSpec spec;
    spec.index = t;
    spec.class_ids = file.session_classes[t];
    for (int c : spec.class_ids) {
      if (!seen.insert(c).second) throw PlanError("split file: class " + std::to_string(c) + " listed twice");
    }
    if (t == 0) {
      for (int c : spec.class_ids) {
        const auto idx = train.indices_of(c);
        spec.support_indices.insert(spec.support_indices.end(), idx.begin(), idx.end());
      }
    } else {
      spec.support_indices = file.support[t];
      for (auto i : spec.support_indices) {
        if (i >= train.size()) throw PlanError("split file: support index " + std::to_string(i) + " out of range");
        if (std::find(spec.class_ids.begin(), spec.class_ids.end(), train.labels[i]) == spec.class_ids.end()) {
          throw PlanError("split file: support index " + std::to_string(i) + " is not in session " +
                          std::to_string(t) + "'s classes");
        }
      }
    }
    spec.support = train.subset(spec.support_indices);
    std::vector<std::size_t> q;
    for (int c : spec.class_ids) {
      const auto idx = test.indices_of(c);
      q.insert(q.end(), idx.begin(), idx.end());
    }
    spec.query = test.subset(q);
    specs.push_back(std::move(spec));
  }
  return specs;
}

}  // namespace fscil
