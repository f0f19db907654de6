/**
 * @file checkpoint.hpp
 * @brief Versioned binary checkpoint: architecture, class registry, named
 *        shape-tagged parameter blobs and the replay buffer.
 *
 * Layout (little-endian):
 *   "FSCILCKP" u32 version
 *   arch:     u32 in_channels, u32 n_stages, u32 widths[n], u32 blocks, u8 norm (0=batch, 1=group),
 *             u32 group_channels, u8 ensemble, f64 cosine_scale
 *   registry: u32 session, u32 n_seen, i32 seen[n], u32 n_base, i32 base[n]
 *   params:   u32 count, then per parameter or norm buffer: u32 name_len, name, u8 dtype (4=f32, 8=f64),
 *             u32 rank, u64 dims[rank], raw values
 *   buffer:   u32 capacity, u32 n_classes, then per class: i32 id, u32 count,
 *             u32 c, u32 h, u32 w, f32 pixels[count·c·h·w]
 */
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "fscil/data.hpp"
#include "fscil/ensemble_net.hpp"
#include "fscil/protocol.hpp"

namespace fscil {

inline constexpr char kCheckpointMagic[8] = {'F', 'S', 'C', 'I', 'L', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  template <typename V>
  void put(V v) {
    static_assert(std::is_trivially_copyable_v<V>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(V));
  }
  void put_raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_raw(s.data(), s.size());
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}

  template <typename V>
  V get() {
    V v;
    get_raw(&v, sizeof(V));
    return v;
  }
  void get_raw(void* out, std::size_t n) {
    if (pos_ + n > b_.size()) {
      throw FormatError("checkpoint truncated at byte offset " + std::to_string(pos_));
    }
    std::memcpy(out, b_.data() + pos_, n);
    pos_ += n;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    std::string s(n, '\0');
    get_raw(s.data(), n);
    return s;
  }
  bool done() const { return pos_ == b_.size(); }
  std::size_t offset() const { return pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
struct Checkpoint {
  std::size_t session = 0;
  EnsembleNet<T> net;
  std::vector<int> seen_classes;
  std::vector<int> base_classes;
  ReplayBuffer buffer;
};

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const SessionState<T>& st) {
  detail::ByteWriter w;
  w.put_raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put(kCheckpointVersion);

  const NetConfig& cfg = st.net.config();
  w.put(static_cast<std::uint32_t>(cfg.backbone.in_channels));
  w.put(static_cast<std::uint32_t>(cfg.backbone.stage_channels.size()));
  for (auto c : cfg.backbone.stage_channels) w.put(static_cast<std::uint32_t>(c));
  w.put(static_cast<std::uint32_t>(cfg.backbone.blocks_per_stage));
  w.put(static_cast<std::uint8_t>(cfg.backbone.norm == NormKind::batch ? 0 : 1));
  w.put(static_cast<std::uint32_t>(cfg.backbone.group_channels));
  w.put(static_cast<std::uint8_t>(cfg.ensemble ? 1 : 0));
  w.put(cfg.cosine_scale);

  const auto put_ids = [&](const std::vector<int>& ids) {
    w.put(static_cast<std::uint32_t>(ids.size()));
    for (int c : ids) w.put(static_cast<std::int32_t>(c));
  };
  w.put(static_cast<std::uint32_t>(st.history.empty() ? 0 : st.history.back().session));
  put_ids(st.seen_classes);
  put_ids(st.base_classes);

  const auto params = st.net.named_state();
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.put_string(p.name);
    w.put(static_cast<std::uint8_t>(sizeof(T)));
    w.put(static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) w.put(static_cast<std::uint64_t>(d));
    w.put_raw(p.tensor.values().data(), p.tensor.numel() * sizeof(T));
  }

  w.put(static_cast<std::uint32_t>(st.buffer.capacity_per_class));
  w.put(static_cast<std::uint32_t>(st.buffer.classes.size()));
  for (const auto& [cls, set] : st.buffer.classes) {
    w.put(static_cast<std::int32_t>(cls));
    w.put(static_cast<std::uint32_t>(set.size()));
    w.put(static_cast<std::uint32_t>(set.channels));
    w.put(static_cast<std::uint32_t>(set.height));
    w.put(static_cast<std::uint32_t>(set.width));
    w.put_raw(set.pixels.data(), set.pixels.size() * sizeof(float));
  }
  return std::move(w.bytes());
}

template <typename T>
Checkpoint<T> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  char magic[8];
  r.get_raw(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw FormatError("checkpoint: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }

  NetConfig cfg;
  cfg.backbone.in_channels = r.get<std::uint32_t>();
  const auto stages = r.get<std::uint32_t>();
  cfg.backbone.stage_channels.clear();
  for (std::uint32_t s = 0; s < stages; ++s) cfg.backbone.stage_channels.push_back(r.get<std::uint32_t>());
  cfg.backbone.blocks_per_stage = r.get<std::uint32_t>();
  const auto norm = r.get<std::uint8_t>();
  if (norm > 1) throw FormatError("checkpoint: unknown norm tag " + std::to_string(norm));
  cfg.backbone.norm = norm == 0 ? NormKind::batch : NormKind::group;
  cfg.backbone.group_channels = r.get<std::uint32_t>();
  cfg.ensemble = r.get<std::uint8_t>() != 0;
  cfg.cosine_scale = r.get<double>();

  const auto get_ids = [&] {
    std::vector<int> ids(r.get<std::uint32_t>());
    for (auto& c : ids) c = r.get<std::int32_t>();
    return ids;
  };
  const std::size_t session = r.get<std::uint32_t>();
  auto seen = get_ids();
  auto base = get_ids();
  if (seen.empty()) throw FormatError("checkpoint: empty class registry");

  Rng dummy(0);
  EnsembleNet<T> net(cfg, seen.size(), dummy);
  const auto count = r.get<std::uint32_t>();
  if (count != net.named_state().size()) {
    throw FormatError("checkpoint: " + std::to_string(count) + " tensors, architecture expects " +
                      std::to_string(net.named_state().size()));
  }
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = r.get_string();
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != 4 && dtype != 8) throw FormatError("checkpoint: unknown dtype tag for " + name);
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    const std::size_t n = numel(shape);
    std::vector<T> values(n);
    if (dtype == 4) {
      std::vector<float> raw(n);
      r.get_raw(raw.data(), n * sizeof(float));
      std::copy(raw.begin(), raw.end(), values.begin());
    } else {
      std::vector<double> raw(n);
      r.get_raw(raw.data(), n * sizeof(double));
      std::transform(raw.begin(), raw.end(), values.begin(), [](double v) { return static_cast<T>(v); });
    }
    net.assign(name, shape, std::move(values));
  }
  if (net.num_classes() != seen.size()) throw FormatError("checkpoint: head rows do not match class registry");

  ReplayBuffer buffer;
  buffer.capacity_per_class = r.get<std::uint32_t>();
  const auto n_classes = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < n_classes; ++k) {
    const int cls = r.get<std::int32_t>();
    LabeledImageSet set;
    const auto n = r.get<std::uint32_t>();
    set.channels = r.get<std::uint32_t>();
    set.height = r.get<std::uint32_t>();
    set.width = r.get<std::uint32_t>();
    set.pixels.resize(static_cast<std::size_t>(n) * set.image_size());
    r.get_raw(set.pixels.data(), set.pixels.size() * sizeof(float));
    set.labels.assign(n, cls);
    buffer.classes.emplace_back(cls, std::move(set));
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes at offset " + std::to_string(r.offset()));
  return {session, std::move(net), std::move(seen), std::move(base), std::move(buffer)};
}

template <typename T>
void save_checkpoint(const SessionState<T>& st, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(st);
  detail::write_bytes(path, bytes);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  const auto bytes = detail::read_bytes(path);
  return decode_checkpoint<T>(bytes);
}

}  // namespace fscil
