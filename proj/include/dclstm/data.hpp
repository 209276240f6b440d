#pragma once

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dclstm/kernels.hpp"
#include "dclstm/rng.hpp"
#include "dclstm/tensor.hpp"

// Video ingestion and preprocessing: uniform temporal sampling with jitter,
// last-frame padding, bilinear resize, the corner/rotate/blur/brightness
// augmentation suite, a synthetic moving-blob dataset for desk-scale
// experiments, and the clip-file / manifest formats.

namespace dclstm {

struct VideoClip {
  Tensor<float> frames;  // [t,h,w,c], values in [0,1]
  int64_t label = 0;
  std::string source_id;
};

enum class Corner { none, TL, TR, BL, BR };

struct AugmentSpec {
  Corner translate_corner = Corner::none;  // 25 px toward the named corner
  double rotate_deg = 0.0;                 // in [-30, 30]
  double gaussian_sigma = 0.0;             // >= 0
  double brightness_delta = 0.0;           // in [-0.3, 0.3]
  uint64_t rng_seed = 0;

  static constexpr int kTranslatePx = 25;

  void validate() const {
    if (rotate_deg < -30.0 || rotate_deg > 30.0)
      throw std::invalid_argument("AugmentSpec: rotation outside [-30, 30] degrees");
    if (gaussian_sigma < 0.0) throw std::invalid_argument("AugmentSpec: negative sigma");
    if (brightness_delta < -0.3 || brightness_delta > 0.3)
      throw std::invalid_argument("AugmentSpec: brightness outside [-0.3, 0.3]");
  }

  static AugmentSpec random(uint64_t seed) {
    Rng rng(seed);
    AugmentSpec s;
    const Corner corners[5] = {Corner::none, Corner::TL, Corner::TR, Corner::BL, Corner::BR};
    s.translate_corner = corners[rng.uniform_int(0, 4)];
    s.rotate_deg = rng.uniform(-30.0, 30.0);
    s.gaussian_sigma = rng.uniform(0.0, 2.0);
    s.brightness_delta = rng.uniform(-0.3, 0.3);
    s.rng_seed = seed;
    return s;
  }
};

// ---------------------------------------------------------------------------
// temporal sampling

// Fixes the clip length to target_t: long clips are partitioned into target_t
// equal real intervals and one frame is drawn per interval (midpoint, or
// uniform within the interval when jitter is on); short clips keep every
// frame and repeat the last one.
inline VideoClip uniform_sample(const VideoClip& clip, int64_t target_t, bool jitter, Rng& rng) {
  if (target_t < 1) throw std::invalid_argument("uniform_sample: target_t must be >= 1");
  if (clip.frames.empty() || clip.frames.shape().rank() != 4)
    throw std::invalid_argument("uniform_sample: empty clip");
  const int64_t t = clip.frames.shape().extent(0);
  std::vector<int64_t> picks(static_cast<size_t>(target_t));
  if (t >= target_t) {
    const double width = static_cast<double>(t) / static_cast<double>(target_t);
    for (int64_t i = 0; i < target_t; ++i) {
      if (jitter) {
        const int64_t lo = static_cast<int64_t>(std::ceil(static_cast<double>(i) * width));
        const int64_t hi = static_cast<int64_t>(std::ceil(static_cast<double>(i + 1) * width)) - 1;
        picks[static_cast<size_t>(i)] = rng.uniform_int(lo, hi);
      } else {
        picks[static_cast<size_t>(i)] =
            static_cast<int64_t>(std::floor(static_cast<double>(i) * width + width / 2.0));
      }
    }
  } else {
    for (int64_t i = 0; i < target_t; ++i) picks[static_cast<size_t>(i)] = std::min(i, t - 1);
  }
  const int64_t fsize = clip.frames.numel() / t;
  VideoClip out;
  out.frames = Tensor<float>{Shape{target_t, clip.frames.shape().extent(1), clip.frames.shape().extent(2),
                                   clip.frames.shape().extent(3)}};
  for (int64_t i = 0; i < target_t; ++i)
    std::copy(clip.frames.data() + picks[static_cast<size_t>(i)] * fsize,
              clip.frames.data() + (picks[static_cast<size_t>(i)] + 1) * fsize,
              out.frames.data() + i * fsize);
  out.label = clip.label;
  out.source_id = clip.source_id;
  return out;
}

// ---------------------------------------------------------------------------
// resize

namespace detail {
// Corner-aligned source coordinate: src = dst*(src_ext-1)/(dst_ext-1);
// a single-pixel output reads the source center.
inline double resize_coord(int64_t dst, int64_t dst_ext, int64_t src_ext) {
  if (dst_ext == 1) return static_cast<double>(src_ext - 1) / 2.0;
  return static_cast<double>(dst) * static_cast<double>(src_ext - 1) / static_cast<double>(dst_ext - 1);
}
}  // namespace detail

inline VideoClip resize(const VideoClip& clip, int64_t out_h, int64_t out_w) {
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize: output extents must be >= 1");
  const int64_t t = clip.frames.shape().extent(0);
  const int64_t h = clip.frames.shape().extent(1), w = clip.frames.shape().extent(2);
  const int64_t c = clip.frames.shape().extent(3);
  VideoClip out;
  out.frames = Tensor<float>{Shape{t, out_h, out_w, c}};
  out.label = clip.label;
  out.source_id = clip.source_id;
  for (int64_t f = 0; f < t; ++f) {
    const float* src = clip.frames.data() + f * h * w * c;
    float* dst = out.frames.data() + f * out_h * out_w * c;
    for (int64_t y = 0; y < out_h; ++y) {
      const float sy = static_cast<float>(detail::resize_coord(y, out_h, h));
      for (int64_t x = 0; x < out_w; ++x) {
        const float sx = static_cast<float>(detail::resize_coord(x, out_w, w));
        bilinear_sample_into(src, h, w, c, sy, sx, dst + (y * out_w + x) * c);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// augmentation

namespace detail {

inline void translate_frame(const float* src, float* dst, int64_t h, int64_t w, int64_t c,
                            int64_t dy, int64_t dx) {
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const int64_t sy = y - dy, sx = x - dx;
      float* drow = dst + (y * w + x) * c;
      if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
        for (int64_t cc = 0; cc < c; ++cc) drow[cc] = 0.0f;
      } else {
        const float* srow = src + (sy * w + sx) * c;
        for (int64_t cc = 0; cc < c; ++cc) drow[cc] = srow[cc];
      }
    }
}

// Rotation about the frame center, bilinear resampling, zero outside.
// Positive angles turn the image content clockwise in (row, col) coordinates.
inline void rotate_frame(const float* src, float* dst, int64_t h, int64_t w, int64_t c, double deg) {
  const double rad = deg * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = static_cast<double>(h - 1) / 2.0, cx = static_cast<double>(w - 1) / 2.0;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const double ry = static_cast<double>(y) - cy, rx = static_cast<double>(x) - cx;
      const float sy = static_cast<float>(cy + cs * ry - sn * rx);
      const float sx = static_cast<float>(cx + sn * ry + cs * rx);
      bilinear_sample_into(src, h, w, c, sy, sx, dst + (y * w + x) * c);
    }
}

// Normalized 1-D Gaussian taps, radius ceil(3*sigma).
inline std::vector<float> gaussian_taps(double sigma) {
  const int64_t r = static_cast<int64_t>(std::ceil(3.0 * sigma));
  std::vector<float> taps(static_cast<size_t>(2 * r + 1));
  double sum = 0.0;
  for (int64_t i = -r; i <= r; ++i) {
    const double v = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    taps[static_cast<size_t>(i + r)] = static_cast<float>(v);
    sum += v;
  }
  for (auto& v : taps) v = static_cast<float>(v / sum);
  return taps;
}

// Separable blur with replicated borders.
inline void blur_frame(float* data, int64_t h, int64_t w, int64_t c, const std::vector<float>& taps,
                       std::vector<float>& scratch) {
  const int64_t r = static_cast<int64_t>(taps.size() / 2);
  scratch.assign(static_cast<size_t>(h * w * c), 0.0f);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t i = -r; i <= r; ++i) {
        const int64_t sy = std::clamp(y + i, int64_t{0}, h - 1);
        const float g = taps[static_cast<size_t>(i + r)];
        for (int64_t cc = 0; cc < c; ++cc)
          scratch[static_cast<size_t>((y * w + x) * c + cc)] += g * data[(sy * w + x) * c + cc];
      }
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      float* drow = data + (y * w + x) * c;
      for (int64_t cc = 0; cc < c; ++cc) drow[cc] = 0.0f;
      for (int64_t i = -r; i <= r; ++i) {
        const int64_t sx = std::clamp(x + i, int64_t{0}, w - 1);
        const float g = taps[static_cast<size_t>(i + r)];
        for (int64_t cc = 0; cc < c; ++cc) drow[cc] += g * scratch[static_cast<size_t>((y * w + sx) * c + cc)];
      }
    }
}

}  // namespace detail

// Corner translation -> rotation -> Gaussian blur -> brightness (clamped).
// One set of transform parameters applies to every frame of the clip.
inline VideoClip augment(const VideoClip& clip, const AugmentSpec& spec) {
  spec.validate();
  const int64_t t = clip.frames.shape().extent(0);
  const int64_t h = clip.frames.shape().extent(1), w = clip.frames.shape().extent(2);
  const int64_t c = clip.frames.shape().extent(3);
  VideoClip out = clip;

  if (spec.translate_corner != Corner::none) {
    int64_t dy = 0, dx = 0;
    switch (spec.translate_corner) {
      case Corner::TL: dy = -AugmentSpec::kTranslatePx; dx = -AugmentSpec::kTranslatePx; break;
      case Corner::TR: dy = -AugmentSpec::kTranslatePx; dx = AugmentSpec::kTranslatePx; break;
      case Corner::BL: dy = AugmentSpec::kTranslatePx; dx = -AugmentSpec::kTranslatePx; break;
      case Corner::BR: dy = AugmentSpec::kTranslatePx; dx = AugmentSpec::kTranslatePx; break;
      case Corner::none: break;
    }
    Tensor<float> shifted(out.frames.shape());
    for (int64_t f = 0; f < t; ++f)
      detail::translate_frame(out.frames.data() + f * h * w * c, shifted.data() + f * h * w * c, h, w, c, dy, dx);
    out.frames = std::move(shifted);
  }

  if (spec.rotate_deg != 0.0) {
    Tensor<float> rotated(out.frames.shape());
    for (int64_t f = 0; f < t; ++f)
      detail::rotate_frame(out.frames.data() + f * h * w * c, rotated.data() + f * h * w * c, h, w, c,
                           spec.rotate_deg);
    out.frames = std::move(rotated);
  }

  if (spec.gaussian_sigma > 0.0) {
    const auto taps = detail::gaussian_taps(spec.gaussian_sigma);
    std::vector<float> scratch;
    for (int64_t f = 0; f < t; ++f)
      detail::blur_frame(out.frames.data() + f * h * w * c, h, w, c, taps, scratch);
  }

  if (spec.brightness_delta != 0.0) {
    const float d = static_cast<float>(spec.brightness_delta);
    for (int64_t i = 0; i < out.frames.numel(); ++i)
      out.frames[i] = std::clamp(out.frames[i] + d, 0.0f, 1.0f);
  }

  guard_finite(out.frames, "augment");
  return out;
}

// ---------------------------------------------------------------------------
// synthetic dataset

// A bright blob on a dark noisy background; the class decides the motion
// pattern, while phase, speed, track position and blob size are per-clip
// nuisance. Patterns 0..3 are the four wrap-around translations whose static
// pixel statistics match, so direction is only visible temporally.
inline std::vector<VideoClip> synth_dataset(int64_t n_clips, int64_t num_classes, int64_t t,
                                            int64_t h, int64_t w, uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("synth_dataset: need at least 2 classes");
  if (num_classes > 8) throw std::invalid_argument("synth_dataset: at most 8 motion patterns");
  if (t < 1 || h < 8 || w < 8) throw std::invalid_argument("synth_dataset: degenerate extents");
  std::vector<VideoClip> clips;
  clips.reserve(static_cast<size_t>(n_clips));
  for (int64_t idx = 0; idx < n_clips; ++idx) {
    Rng rng(seed ^ static_cast<uint64_t>(idx));  // per-clip stream
    const int64_t cls = idx % num_classes;
    const double phase = rng.uniform();
    const double phase2 = rng.uniform();
    const double speed = rng.uniform(0.75, 1.25);
    // full-range track positions keep per-pixel occupancy identical across
    // classes; rendering wraps, so edge positions are unremarkable
    const double fixed_y = rng.uniform() * static_cast<double>(h - 1);
    const double fixed_x = rng.uniform() * static_cast<double>(w - 1);
    const double sigma0 = rng.uniform(0.09, 0.13) * static_cast<double>(h);
    const double amp = rng.uniform(0.8, 1.0);

    VideoClip clip;
    clip.frames = Tensor<float>{Shape{t, h, w, 1}};
    clip.label = cls;
    clip.source_id = "synth_" + std::to_string(idx);
    for (int64_t f = 0; f < t; ++f) {
      const double u = phase + speed * static_cast<double>(f) / static_cast<double>(t);
      const double wrap = u - std::floor(u);
      double cy = fixed_y, cx = fixed_x, sigma = sigma0;
      switch (cls) {
        case 0: cx = wrap * static_cast<double>(w - 1); break;                    // right
        case 1: cy = wrap * static_cast<double>(h - 1); break;                    // down
        case 2: cx = (1.0 - wrap) * static_cast<double>(w - 1); break;            // left
        case 3: cy = (1.0 - wrap) * static_cast<double>(h - 1); break;            // up
        case 4: {                                                                 // diagonal
          cx = wrap * static_cast<double>(w - 1);
          const double v = phase2 + speed * static_cast<double>(f) / static_cast<double>(t);
          cy = (v - std::floor(v)) * static_cast<double>(h - 1);
          break;
        }
        case 5:  // pulsating blob at a fixed center
          sigma = sigma0 * (0.6 + 0.8 * std::abs(2.0 * wrap - 1.0));
          break;
        case 6: {  // circular orbit
          const double ang = 2.0 * 3.14159265358979323846 * wrap;
          cy = static_cast<double>(h - 1) * (0.5 + 0.3 * std::sin(ang));
          cx = static_cast<double>(w - 1) * (0.5 + 0.3 * std::cos(ang));
          break;
        }
        case 7: {  // horizontal sweep with vertical zigzag
          cx = wrap * static_cast<double>(w - 1);
          cy = static_cast<double>(h - 1) *
               (0.5 + 0.3 * std::sin(2.0 * 3.14159265358979323846 * (phase2 + 2.0 * wrap)));
          break;
        }
        default: break;
      }
      float* frame = clip.frames.data() + f * h * w;
      const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
          // wrap-around distance so the blob re-enters smoothly
          double dy = std::abs(static_cast<double>(y) - cy);
          double dx = std::abs(static_cast<double>(x) - cx);
          dy = std::min(dy, static_cast<double>(h) - dy);
          dx = std::min(dx, static_cast<double>(w) - dx);
          const double g = amp * std::exp(-(dy * dy + dx * dx) * inv2s2);
          const double noise = 0.05 * rng.uniform();
          frame[y * w + x] = static_cast<float>(std::min(1.0, g + noise));
        }
    }
    clips.push_back(std::move(clip));
  }
  return clips;
}

// ---------------------------------------------------------------------------
// split

// Stratified by class and grouped by source_id: augmented variants of one
// source never straddle the split.
inline std::pair<std::vector<size_t>, std::vector<size_t>> train_val_split(
    const std::vector<VideoClip>& clips, double val_fraction, Rng& rng) {
  if (val_fraction <= 0.0 || val_fraction >= 1.0)
    throw std::invalid_argument("train_val_split: fraction must be in (0,1)");
  // group clips by source, keyed by class
  std::map<int64_t, std::map<std::string, std::vector<size_t>>> by_class;
  for (size_t i = 0; i < clips.size(); ++i) by_class[clips[i].label][clips[i].source_id].push_back(i);

  std::vector<size_t> train, val;
  for (auto& [cls, groups_map] : by_class) {
    if (groups_map.size() < 2)
      throw std::invalid_argument("train_val_split: class " + std::to_string(cls) +
                                  " has fewer than 2 source clips");
    std::vector<std::vector<size_t>> groups;
    int64_t class_total = 0;
    for (auto& [src, idxs] : groups_map) {
      class_total += static_cast<int64_t>(idxs.size());
      groups.push_back(idxs);
    }
    for (size_t i = groups.size(); i > 1; --i)
      std::swap(groups[i - 1], groups[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
    const int64_t target = std::max<int64_t>(
        1, static_cast<int64_t>(std::llround(val_fraction * static_cast<double>(class_total))));
    int64_t taken = 0;
    for (size_t gi = 0; gi < groups.size(); ++gi) {
      // keep at least one group on the training side
      const bool to_val = taken < target && gi + 1 < groups.size();
      for (size_t idx : groups[gi]) (to_val ? val : train).push_back(idx);
      if (to_val) taken += static_cast<int64_t>(groups[gi].size());
    }
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {train, val};
}

// ---------------------------------------------------------------------------
// clip files and manifests

namespace detail {
template <typename V>
void write_le(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <typename V>
V read_le(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw std::runtime_error("clip file: truncated");
  return v;
}
}  // namespace detail

inline constexpr uint16_t kClipVersion = 1;

// Magic "VCLP", version u16, t/h/w/c u32 LE, label u32, payload f32 LE
// row-major.
inline void save_clip(const VideoClip& clip, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_clip: cannot open " + path);
  os.write("VCLP", 4);
  detail::write_le<uint16_t>(os, kClipVersion);
  for (int a = 0; a < 4; ++a) detail::write_le<uint32_t>(os, static_cast<uint32_t>(clip.frames.shape().extent(a)));
  detail::write_le<uint32_t>(os, static_cast<uint32_t>(clip.label));
  os.write(reinterpret_cast<const char*>(clip.frames.data()),
           static_cast<std::streamsize>(clip.frames.numel() * sizeof(float)));
  if (!os) throw std::runtime_error("save_clip: write failed for " + path);
}

inline VideoClip load_clip(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_clip: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "VCLP", 4) != 0) throw std::runtime_error("load_clip: bad magic in " + path);
  const uint16_t version = detail::read_le<uint16_t>(is);
  if (version != kClipVersion) throw std::runtime_error("load_clip: unsupported version in " + path);
  uint32_t dims[4];
  for (auto& d : dims) d = detail::read_le<uint32_t>(is);
  const uint32_t label = detail::read_le<uint32_t>(is);
  VideoClip clip;
  clip.frames = Tensor<float>{Shape{dims[0], dims[1], dims[2], dims[3]}};
  is.read(reinterpret_cast<char*>(clip.frames.data()),
          static_cast<std::streamsize>(clip.frames.numel() * sizeof(float)));
  if (!is) throw std::runtime_error("load_clip: truncated payload in " + path);
  clip.label = label;
  check_finite(clip.frames, "load_clip");
  return clip;
}

struct ManifestEntry {
  std::string path;
  int64_t label;
  std::string source_id;
};

// One "path<TAB>label<TAB>source_id" per line.
inline void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_manifest: cannot open " + path);
  for (const auto& e : entries) os << e.path << '\t' << e.label << '\t' << e.source_id << '\n';
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_manifest: cannot open " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos)
      throw std::runtime_error("read_manifest: malformed line: " + line);
    entries.push_back({line.substr(0, t1), std::stoll(line.substr(t1 + 1, t2 - t1 - 1)), line.substr(t2 + 1)});
  }
  return entries;
}

// Loads every clip named by a manifest; relative paths resolve against the
// manifest's directory. The manifest label is authoritative and must agree
// with the clip header.
inline std::vector<VideoClip> load_corpus(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  const fs::path base = fs::path(manifest_path).parent_path();
  std::vector<VideoClip> clips;
  for (const auto& e : read_manifest(manifest_path)) {
    fs::path p(e.path);
    if (p.is_relative()) p = base / p;
    VideoClip clip = load_clip(p.string());
    if (clip.label != e.label)
      throw std::runtime_error("load_corpus: label mismatch for " + e.path);
    clip.source_id = e.source_id;
    clips.push_back(std::move(clip));
  }
  return clips;
}

}  // namespace dclstm
