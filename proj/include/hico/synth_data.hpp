#pragma once

// Synthetic labelled videos, frame-pair sampling and augmentation.
//
// A video is a class-dependent oriented cosine grating, phase anchored at the
// image centre and jittered per video, with slow phase drift. Every frame adds
// fresh patches from a texture bank shared by all classes, plus Gaussian
// noise. Frames of one video share their global pattern; local textures carry
// no class or video information.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "hico/error.hpp"
#include "hico/io.hpp"
#include "hico/rng.hpp"
#include "hico/tensor.hpp"

namespace hico {

struct GeneratorParams {
  double freq_min = 2.0;  // cycles per image
  double freq_max = 6.0;
  double orientation_offset = 0.0;  // radians
  double texture_amplitude = 0.25;
  double noise_sigma = 0.05;
  double drift = 0.15;  // radians of phase per frame, at most
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::size_t num_videos = 60;
  std::size_t num_classes = 3;
  std::size_t frames_per_video = 8;
  std::size_t image_size = 64;
  GeneratorParams gen;

  void validate() const {
    require(num_classes >= 2, ErrorKind::ConfigError, "num_classes must be >= 2");
    require(num_videos >= num_classes, ErrorKind::ConfigError, "num_videos < num_classes");
    require(frames_per_video >= 2, ErrorKind::ConfigError, "frames_per_video must be >= 2");
    require(image_size >= 8, ErrorKind::ConfigError, "image_size must be >= 8");
    require(gen.freq_min > 0.0 && gen.freq_max >= gen.freq_min, ErrorKind::ConfigError, "bad frequency range");
    require(gen.texture_amplitude >= 0.0 && gen.noise_sigma >= 0.0 && gen.drift >= 0.0, ErrorKind::ConfigError,
            "generator amplitudes must be >= 0");
  }

  std::string to_text() const {
    std::string s;
    auto kv = [&s](const char* k, const std::string& v) { s += std::string(k) + "=" + v + "\n"; };
    kv("seed", std::to_string(seed));
    kv("num_videos", std::to_string(num_videos));
    kv("num_classes", std::to_string(num_classes));
    kv("frames_per_video", std::to_string(frames_per_video));
    kv("image_size", std::to_string(image_size));
    kv("freq_min", format_double(gen.freq_min));
    kv("freq_max", format_double(gen.freq_max));
    kv("orientation_offset", format_double(gen.orientation_offset));
    kv("texture_amplitude", format_double(gen.texture_amplitude));
    kv("noise_sigma", format_double(gen.noise_sigma));
    kv("drift", format_double(gen.drift));
    return s;
  }

  static DatasetManifest from_text(std::string_view text) {
    auto kv = parse_key_values(text, "manifest");
    DatasetManifest m;
    auto take = [&kv](const char* key, auto& field) {
      auto it = kv.find(key);
      if (it == kv.end()) return;
      try {
        if constexpr (std::is_same_v<std::decay_t<decltype(field)>, double>) {
          field = std::stod(it->second);
        } else {
          field = static_cast<std::decay_t<decltype(field)>>(std::stoull(it->second));
        }
      } catch (const std::exception&) {
        fail(ErrorKind::FormatError, std::string("manifest value for ") + key + " is not a number");
      }
      kv.erase(it);
    };
    take("seed", m.seed);
    take("num_videos", m.num_videos);
    take("num_classes", m.num_classes);
    take("frames_per_video", m.frames_per_video);
    take("image_size", m.image_size);
    take("freq_min", m.gen.freq_min);
    take("freq_max", m.gen.freq_max);
    take("orientation_offset", m.gen.orientation_offset);
    take("texture_amplitude", m.gen.texture_amplitude);
    take("noise_sigma", m.gen.noise_sigma);
    take("drift", m.gen.drift);
    require(kv.empty(), ErrorKind::FormatError, "unknown manifest key " + (kv.empty() ? "" : kv.begin()->first));
    return m;
  }
};

/// Pretraining corpus defaults.
inline DatasetManifest pretrain_manifest(std::uint64_t seed = 2024) {
  DatasetManifest m;
  m.seed = seed;
  return m;
}

/// Downstream corpus: other seed, fewer videos, shifted orientations and a
/// lower frequency band.
inline DatasetManifest downstream_manifest(std::uint64_t seed = 4048) {
  DatasetManifest m;
  m.seed = seed;
  m.num_videos = 45;
  m.gen.freq_min = 1.5;
  m.gen.freq_max = 5.0;
  m.gen.orientation_offset = std::numbers::pi / 12.0;
  return m;
}

struct VideoRecord {
  std::uint32_t video_id = 0;
  std::uint32_t class_id = 0;
  Tensor frames;  // [T, 1, H, W], values in [0, 1]

  std::size_t num_frames() const { return frames.dim(0); }

  /// One frame as [1, H, W].
  Tensor frame(std::size_t t) const {
    const std::size_t h = frames.dim(2), w = frames.dim(3);
    auto src = frames.data().subspan(t * h * w, h * w);
    return Tensor(Shape{1, h, w}, std::vector<double>(src.begin(), src.end()));
  }
};

struct VideoDataset {
  std::size_t num_classes = 0;
  std::size_t image_size = 0;
  std::vector<VideoRecord> videos;

  std::size_t size() const { return videos.size(); }
  friend bool operator==(const VideoDataset& a, const VideoDataset& b) {
    if (a.num_classes != b.num_classes || a.image_size != b.image_size || a.videos.size() != b.videos.size())
      return false;
    for (std::size_t i = 0; i < a.videos.size(); ++i) {
      const VideoRecord &x = a.videos[i], &y = b.videos[i];
      if (x.video_id != y.video_id || x.class_id != y.class_id || !(x.frames == y.frames)) return false;
    }
    return true;
  }
};

namespace detail {

/// Smoothed noise patches in [-1, 1], shared by all classes.
inline std::vector<Tensor> texture_bank(std::uint64_t seed, std::size_t count, std::size_t side) {
  std::vector<Tensor> bank;
  for (std::size_t k = 0; k < count; ++k) {
    SplitMix64 rng(derive_seed(seed, "texture-bank", k));
    Tensor raw(Shape{side, side});
    for (double& v : raw.vec()) v = rng.normal();
    Tensor smooth(Shape{side, side});
    double peak = 1e-12;
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < 3; ++dy)
          for (std::size_t dx = 0; dx < 3; ++dx) acc += raw.at((y + side + dy - 1) % side, (x + side + dx - 1) % side);
        // Fade to zero at the patch border.
        const double wy = std::sin(std::numbers::pi * (static_cast<double>(y) + 0.5) / static_cast<double>(side));
        const double wx = std::sin(std::numbers::pi * (static_cast<double>(x) + 0.5) / static_cast<double>(side));
        smooth.at(y, x) = acc * wy * wx;
        peak = std::max(peak, std::abs(smooth.at(y, x)));
      }
    for (double& v : smooth.vec()) v /= peak;
    bank.push_back(std::move(smooth));
  }
  return bank;
}

inline constexpr std::size_t kBankSize = 6;
inline constexpr std::size_t kPatchesPerFrame = 4;

}  // namespace detail

/// Deterministic generation; classes assigned round-robin.
inline VideoDataset generate_dataset(const DatasetManifest& m) {
  m.validate();
  const std::size_t s = m.image_size, frames = m.frames_per_video, c = m.num_classes;
  const std::size_t patch = std::max<std::size_t>(4, s / 4);
  const auto bank = detail::texture_bank(m.seed, detail::kBankSize, patch);
  const double pi = std::numbers::pi;

  VideoDataset ds{c, s, {}};
  ds.videos.reserve(m.num_videos);
  for (std::size_t v = 0; v < m.num_videos; ++v) {
    SplitMix64 rng(derive_seed(m.seed, "video", v));
    const std::size_t cls = v % c;
    // The class fixes the angle to the x axis up to sign, so a horizontal
    // flip (theta -> -theta) never changes the class.
    const double nc = static_cast<double>(c);
    const double magnitude = m.gen.orientation_offset + 0.5 * pi * (static_cast<double>(cls) + 0.5) / nc +
                             rng.uniform(-1.0, 1.0) * pi / (12.0 * nc);
    const double theta = rng.bernoulli(0.5) ? magnitude : -magnitude;
    const double band = (m.gen.freq_max - m.gen.freq_min) / static_cast<double>(c);
    const double freq = m.gen.freq_min + band * (static_cast<double>(cls) + rng.uniform(0.1, 0.9));
    const double phase = rng.uniform(-pi / 3.0, pi / 3.0);
    const double phase_rate = m.gen.drift * rng.uniform(-1.0, 1.0);
    const double level = rng.uniform(-0.1, 0.1);

    Tensor out(Shape{frames, 1, s, s});
    const double kx = 2.0 * pi * freq * std::cos(theta) / static_cast<double>(s);
    const double ky = 2.0 * pi * freq * std::sin(theta) / static_cast<double>(s);
    const double half = 0.5 * static_cast<double>(s - 1);
    std::vector<double> img(s * s);
    for (std::size_t t = 0; t < frames; ++t) {
      const double ph = phase + phase_rate * static_cast<double>(t);
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x)
          img[y * s + x] =
              0.5 + level +
              0.25 * std::cos(kx * (static_cast<double>(x) - half) + ky * (static_cast<double>(y) - half) + ph);
      // Texture patches are redrawn every frame, like speckle: they carry no
      // video identity and no class.
      for (std::size_t p = 0; p < detail::kPatchesPerFrame; ++p) {
        const Tensor& tex = bank[rng.below(detail::kBankSize)];
        const std::size_t oy = rng.below(s - patch + 1), ox = rng.below(s - patch + 1);
        const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            img[(oy + y) * s + ox + x] += sign * m.gen.texture_amplitude * tex.at(y, x);
      }
      for (std::size_t i = 0; i < s * s; ++i) {
        const double noisy = std::clamp(img[i] + m.gen.noise_sigma * rng.normal(), 0.0, 1.0);
        out[t * s * s + i] = static_cast<double>(static_cast<float>(noisy));
      }
    }
    ds.videos.push_back({static_cast<std::uint32_t>(v), static_cast<std::uint32_t>(cls), std::move(out)});
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation.

struct AugmentConfig {
  double crop_min = 0.6;
  double crop_max = 1.0;
  double flip_prob = 0.5;
  double brightness = 0.2;  // additive, uniform in [-b, b]
  double contrast_min = 0.8;
  double contrast_max = 1.25;

  static AugmentConfig none() { return {1.0, 1.0, 0.0, 0.0, 1.0, 1.0}; }
};

/// One concrete draw of the augmentation.
struct AugmentParams {
  double crop = 1.0;  // side as a fraction of the frame
  double offset_y = 0.0;
  double offset_x = 0.0;
  bool flip = false;
  double contrast = 1.0;
  double brightness = 0.0;
};

inline AugmentParams draw_augment(const AugmentConfig& cfg, std::size_t size, SplitMix64& rng) {
  AugmentParams p;
  p.crop = rng.uniform(cfg.crop_min, cfg.crop_max);
  const double slack = (1.0 - p.crop) * static_cast<double>(size - 1);
  p.offset_y = rng.uniform(0.0, slack);
  p.offset_x = rng.uniform(0.0, slack);
  p.flip = rng.bernoulli(cfg.flip_prob);
  p.contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max);
  p.brightness = rng.uniform(-cfg.brightness, cfg.brightness);
  return p;
}

/// Crop, corner-aligned bilinear resize back to H x W, optional horizontal
/// flip, then x * contrast + brightness clipped to [0, 1]. Output pixel i
/// samples source coordinate offset + i * crop.
inline Tensor apply_augment(const Tensor& frame, const AugmentParams& p) {
  require(frame.shape().rank() == 3 && frame.dim(0) == 1 && frame.dim(1) == frame.dim(2), ErrorKind::ShapeError,
          "augment expects a square [1, H, W] frame");
  const std::size_t s = frame.dim(1);
  const double last = static_cast<double>(s - 1);
  Tensor out(frame.shape());
  for (std::size_t i = 0; i < s; ++i) {
    const double sy = std::clamp(p.offset_y + static_cast<double>(i) * p.crop, 0.0, last);
    const std::size_t y0 = static_cast<std::size_t>(sy), y1 = std::min(y0 + 1, s - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t j = 0; j < s; ++j) {
      const double sx = std::clamp(p.offset_x + static_cast<double>(j) * p.crop, 0.0, last);
      const std::size_t x0 = static_cast<std::size_t>(sx), x1 = std::min(x0 + 1, s - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = frame[y0 * s + x0] * (1.0 - fx) + frame[y0 * s + x1] * fx;
      const double bottom = frame[y1 * s + x0] * (1.0 - fx) + frame[y1 * s + x1] * fx;
      const double v = top * (1.0 - fy) + bottom * fy;
      const std::size_t col = p.flip ? s - 1 - j : j;
      out[i * s + col] = std::clamp(v * p.contrast + p.brightness, 0.0, 1.0);
    }
  }
  return out;
}

inline Tensor augment_frame(const Tensor& frame, const AugmentConfig& cfg, std::uint64_t seed) {
  SplitMix64 rng(seed);
  return apply_augment(frame, draw_augment(cfg, frame.dim(1), rng));
}

// ---------------------------------------------------------------------------
// Pairs and batches.

struct FramePair {
  Tensor view1;  // [1, H, W]
  Tensor view2;
  std::size_t frame1 = 0;
  std::size_t frame2 = 0;
  std::uint32_t video_id = 0;
  std::uint32_t class_id = 0;
  bool labeled = false;
};

/// Two distinct frames drawn uniformly, each augmented independently.
inline FramePair sample_positive_pair(const VideoRecord& video, std::uint64_t seed,
                                      const AugmentConfig& aug = AugmentConfig{}) {
  const std::size_t t = video.num_frames();
  require(t >= 2, ErrorKind::TooFewFrames, "video " + std::to_string(video.video_id) + " has fewer than 2 frames");
  SplitMix64 rng(seed);
  FramePair pair;
  pair.frame1 = rng.below(t);
  pair.frame2 = rng.below(t - 1);
  if (pair.frame2 >= pair.frame1) ++pair.frame2;
  const std::size_t s = video.frames.dim(2);
  const AugmentParams a1 = draw_augment(aug, s, rng);
  const AugmentParams a2 = draw_augment(aug, s, rng);
  pair.view1 = apply_augment(video.frame(pair.frame1), a1);
  pair.view2 = apply_augment(video.frame(pair.frame2), a2);
  pair.video_id = video.video_id;
  pair.class_id = video.class_id;
  return pair;
}

/// Fixed labelled subset: round(rate * V) videos chosen once by seed.
inline std::vector<bool> labeled_mask(std::size_t num_videos, double label_rate, std::uint64_t seed) {
  require(label_rate >= 0.0 && label_rate <= 1.0, ErrorKind::ConfigError, "label_rate must be in [0,1]");
  std::vector<std::size_t> order(num_videos);
  for (std::size_t i = 0; i < num_videos; ++i) order[i] = i;
  SplitMix64 rng(derive_seed(seed, "label-mask"));
  shuffle(order.begin(), order.end(), rng);
  const auto count = static_cast<std::size_t>(std::llround(label_rate * static_cast<double>(num_videos)));
  std::vector<bool> mask(num_videos, false);
  for (std::size_t i = 0; i < count; ++i) mask[order[i]] = true;
  return mask;
}

/// Epoch order of video indices; the trailing partial batch is dropped.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t num_videos, std::size_t batch_size,
                                                           std::uint64_t epoch_seed) {
  require(batch_size >= 1, ErrorKind::ConfigError, "batch size must be >= 1");
  require(batch_size <= num_videos, ErrorKind::ConfigError,
          "batch size " + std::to_string(batch_size) + " exceeds " + std::to_string(num_videos) + " videos");
  std::vector<std::size_t> order(num_videos);
  for (std::size_t i = 0; i < num_videos; ++i) order[i] = i;
  SplitMix64 rng(derive_seed(epoch_seed, "order"));
  shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b + batch_size <= num_videos; b += batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                         order.begin() + static_cast<std::ptrdiff_t>(b + batch_size));
  return batches;
}

/// Pairs for the given videos. Per-item seeds come from (epoch_seed, video id).
inline std::vector<FramePair> make_pairs(const VideoDataset& ds, const std::vector<std::size_t>& videos,
                                         std::uint64_t epoch_seed, const std::vector<bool>& labeled,
                                         const AugmentConfig& aug) {
  std::vector<FramePair> out;
  out.reserve(videos.size());
  for (std::size_t v : videos) {
    const VideoRecord& rec = ds.videos[v];
    FramePair p = sample_positive_pair(rec, derive_seed(epoch_seed, "pair", rec.video_id), aug);
    p.labeled = labeled.empty() ? false : labeled[v];
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<std::vector<FramePair>> make_batches(const VideoDataset& ds, std::size_t batch_size,
                                                        std::uint64_t epoch_seed, const std::vector<bool>& labeled,
                                                        const AugmentConfig& aug = AugmentConfig{}) {
  std::vector<std::vector<FramePair>> out;
  for (const auto& ids : epoch_batches(ds.size(), batch_size, epoch_seed))
    out.push_back(make_pairs(ds, ids, epoch_seed, labeled, aug));
  return out;
}

/// Stacks view 1 (or view 2) of each pair into [N, 1, H, W].
inline Tensor stack_views(const std::vector<FramePair>& pairs, bool second) {
  require(!pairs.empty(), ErrorKind::EmptyBatch, "no pairs to stack");
  const Tensor& first = second ? pairs[0].view2 : pairs[0].view1;
  const std::size_t h = first.dim(1), w = first.dim(2);
  Tensor out(Shape{pairs.size(), 1, h, w});
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Tensor& v = second ? pairs[i].view2 : pairs[i].view1;
    std::copy(v.vec().begin(), v.vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(i * h * w));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files.

inline constexpr char kDatasetMagic[4] = {'H', 'I', 'C', 'O'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::vector<std::uint8_t> encode_dataset(const VideoDataset& ds) {
  ByteWriter w;
  w.raw(std::string_view(kDatasetMagic, 4));
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(static_cast<std::uint32_t>(ds.num_classes));
  w.u32(static_cast<std::uint32_t>(ds.image_size));
  for (const VideoRecord& v : ds.videos) {
    w.u32(v.video_id);
    w.u32(v.class_id);
    w.u32(static_cast<std::uint32_t>(v.num_frames()));
    for (double x : v.frames.vec()) w.f32(static_cast<float>(x));
  }
  return std::move(w.bytes());
}

inline VideoDataset decode_dataset(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes.data(), bytes.size(), "dataset file");
  require(bytes.size() >= 4 && std::equal(kDatasetMagic, kDatasetMagic + 4, bytes.begin()), ErrorKind::FormatError,
          "not a dataset file (bad magic)");
  r.str(4);
  const std::uint32_t version = r.u32();
  require(version == kDatasetVersion, ErrorKind::FormatError, "unsupported dataset version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  VideoDataset ds;
  ds.num_classes = r.u32();
  ds.image_size = r.u32();
  require(ds.image_size >= 1, ErrorKind::CorruptFile, "dataset image size is zero");
  const std::size_t pixels = ds.image_size * ds.image_size;
  for (std::uint32_t i = 0; i < count; ++i) {
    VideoRecord v;
    v.video_id = r.u32();
    v.class_id = r.u32();
    const std::uint32_t t = r.u32();
    require(t >= 1, ErrorKind::CorruptFile, "video with zero frames");
    r.need(static_cast<std::size_t>(t) * pixels * 4);
    v.frames = Tensor(Shape{t, 1, ds.image_size, ds.image_size});
    for (double& x : v.frames.vec()) x = r.f32();
    ds.videos.push_back(std::move(v));
  }
  require(r.remaining() == 0, ErrorKind::CorruptFile, "trailing bytes after dataset payload");
  return ds;
}

inline void write_dataset(const VideoDataset& ds, const std::filesystem::path& path) {
  write_file_atomic(path, encode_dataset(ds));
}

inline VideoDataset read_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  write_text_atomic(path, m.to_text());
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return DatasetManifest::from_text(std::string(bytes.begin(), bytes.end()));
}

}  // namespace hico
