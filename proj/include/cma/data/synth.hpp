#pragma once

// Synthetic long-tail segmentation data: one elliptical "organ" per image
// with 1-2 small "tumor" blobs strictly inside it, plus Gaussian intensity
// noise. Everything is a pure function of (n, H, W, seed). Images are
// quantized to 8 bits at generation time so the in-memory dataset and its
// PNG round-trip are identical.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cma/core/common.hpp"
#include "cma/core/rng.hpp"
#include "cma/core/tensor.hpp"
#include "cma/io/png.hpp"
#include "cma/loss/contrast.hpp"

namespace cma::data {

using json = nlohmann::json;

enum class Split { Train, Val, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    default: return "test";
  }
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw DataError("unknown split name: " + s);
}

constexpr uint8_t kBackground = 0;
constexpr uint8_t kOrgan = 1;
constexpr uint8_t kTumor = 2;
constexpr int kNumClasses = 3;

struct SampleRecord {
  std::string id;
  std::vector<uint8_t> image;  // H*W gray levels
  std::vector<uint8_t> label;  // H*W in {0,1,2}
  uint64_t seed = 0;
};

struct ManifestEntry {
  std::string id;
  Split split = Split::Train;
  bool labeled = true;
};

struct DatasetManifest {
  uint64_t seed = 0;
  int64_t n = 0, height = 0, width = 0;
  double noise_std = 0.10;
  std::vector<ManifestEntry> entries;
  std::string content_hash;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<SampleRecord> samples;

  std::vector<size_t> indices_of(Split s) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < manifest.entries.size(); ++i)
      if (manifest.entries[i].split == s) out.push_back(i);
    return out;
  }

  std::vector<size_t> train_indices(bool labeled) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < manifest.entries.size(); ++i)
      if (manifest.entries[i].split == Split::Train && manifest.entries[i].labeled == labeled)
        out.push_back(i);
    return out;
  }

  // [B,1,H,W] doubles in [0,1]
  Tensor images_for(const std::vector<size_t>& idx) const {
    const int64_t h = manifest.height, w = manifest.width;
    Tensor t = Tensor::zeros({static_cast<int64_t>(idx.size()), 1, h, w});
    for (size_t b = 0; b < idx.size(); ++b) {
      const auto& img = samples[idx[b]].image;
      for (int64_t i = 0; i < h * w; ++i)
        t.data()[static_cast<int64_t>(b) * h * w + i] = static_cast<real>(img[static_cast<size_t>(i)]) / 255.0;
    }
    return t;
  }

  std::vector<const std::vector<uint8_t>*> labels_for(const std::vector<size_t>& idx) const {
    std::vector<const std::vector<uint8_t>*> out;
    out.reserve(idx.size());
    for (size_t i : idx) out.push_back(&samples[i].label);
    return out;
  }
};

// FNV-1a 64
class Hasher {
public:
  void update(const void* ptr, size_t len) {
    const auto* p = static_cast<const uint8_t*>(ptr);
    for (size_t i = 0; i < len; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void update(const std::string& s) { update(s.data(), s.size()); }
  void update_u64(uint64_t v) { update(&v, sizeof(v)); }

  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h_));
    return std::string("fnv1a64:") + buf;
  }

private:
  uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string content_hash(const DatasetManifest& m, const std::vector<SampleRecord>& samples) {
  Hasher h;
  h.update_u64(m.seed);
  h.update_u64(static_cast<uint64_t>(m.n));
  h.update_u64(static_cast<uint64_t>(m.height));
  h.update_u64(static_cast<uint64_t>(m.width));
  for (size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    h.update(e.id);
    h.update(split_name(e.split));
    h.update_u64(e.labeled ? 1 : 0);
    h.update(samples[i].image.data(), samples[i].image.size());
    h.update(samples[i].label.data(), samples[i].label.size());
  }
  return h.hex();
}

struct GenOptions {
  double noise_std = 0.10;
  double bg_level = 0.20;
  double organ_level = 0.55;
  double tumor_level = 0.80;
  double level_jitter = 0.05;
};

namespace detail {

inline void rasterize_ellipse(std::vector<uint8_t>& label, int64_t h, int64_t w, double cx, double cy,
                              double a, double b, double theta, uint8_t value) {
  const double ct = std::cos(theta), st = std::sin(theta);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) - cx;
      const double dy = static_cast<double>(y) - cy;
      const double u = (dx * ct + dy * st) / a;
      const double v = (-dx * st + dy * ct) / b;
      if (u * u + v * v <= 1.0) label[static_cast<size_t>(y * w + x)] = value;
    }
}

}  // namespace detail

inline SampleRecord generate_sample(int64_t h, int64_t w, uint64_t sample_seed, const GenOptions& opt) {
  Rng rng(sample_seed);
  SampleRecord rec;
  rec.seed = sample_seed;
  rec.label.assign(static_cast<size_t>(h * w), kBackground);

  // Organ: rotated ellipse covering 8-40% of the image.
  const double organ_frac = rng.uniform(0.08, 0.40);
  const double aspect = rng.uniform(1.0, 2.2);
  const double theta = rng.uniform(0.0, 3.14159265358979323846);
  double b = std::sqrt(organ_frac * static_cast<double>(h * w) / (3.14159265358979323846 * aspect));
  double a = aspect * b;
  double cx = 0.5 * static_cast<double>(w - 1) + rng.uniform(-0.08, 0.08) * static_cast<double>(w);
  double cy = 0.5 * static_cast<double>(h - 1) + rng.uniform(-0.08, 0.08) * static_cast<double>(h);
  const double margin = std::min(std::min(cx, static_cast<double>(w - 1) - cx),
                                 std::min(cy, static_cast<double>(h - 1) - cy)) - 1.5;
  if (a > margin) {
    const double scale = margin / a;
    a *= scale;
    b *= scale;
  }
  detail::rasterize_ellipse(rec.label, h, w, cx, cy, a, b, theta, kOrgan);

  std::vector<uint8_t> organ_mask(rec.label.size());
  for (size_t i = 0; i < rec.label.size(); ++i) organ_mask[i] = rec.label[i] == kOrgan ? 1 : 0;
  int64_t organ_area = 0;
  for (uint8_t m : organ_mask) organ_area += m;

  // Tumors: 1-2 round blobs strictly inside the organ, 0.2-4% of the image
  // in total (capped further so the organ always stays the larger class).
  const double tumor_cap = std::min(0.04, organ_frac / 3.0);
  const double tumor_frac = rng.uniform(0.002, tumor_cap);
  const int n_blobs = rng.uniform() < 0.5 ? 1 : 2;
  const std::vector<real> organ_dist = loss::boundary_distance_sq(organ_mask, h, w);

  std::vector<double> budgets;
  if (n_blobs == 1)
    budgets = {tumor_frac};
  else
    budgets = {0.6 * tumor_frac, 0.4 * tumor_frac};

  for (double frac : budgets) {
    double r = std::sqrt(frac * static_cast<double>(h * w) / 3.14159265358979323846);
    r = std::max(r, 1.0);
    for (int attempt = 0; attempt < 200; ++attempt) {
      const int64_t x = rng.randint(0, w);
      const int64_t y = rng.randint(0, h);
      const size_t at = static_cast<size_t>(y * w + x);
      const double need = (r + 1.0) * (r + 1.0);
      if (!organ_mask[at] || organ_dist[at] < need) {
        // Shrink slowly if the organ is too thin for this radius anywhere.
        if (attempt > 0 && attempt % 50 == 0) r = std::max(1.0, r * 0.8);
        continue;
      }
      detail::rasterize_ellipse(rec.label, h, w, static_cast<double>(x), static_cast<double>(y), r, r,
                                0.0, kTumor);
      break;
    }
  }
  // Guarantee at least one tumor pixel even on pathological draws.
  bool has_tumor = false;
  for (uint8_t l : rec.label) has_tumor = has_tumor || l == kTumor;
  if (!has_tumor) {
    int64_t best = -1;
    real best_d = -1.0;
    for (int64_t i = 0; i < h * w; ++i)
      if (organ_mask[static_cast<size_t>(i)] && organ_dist[static_cast<size_t>(i)] > best_d) {
        best_d = organ_dist[static_cast<size_t>(i)];
        best = i;
      }
    rec.label[static_cast<size_t>(best)] = kTumor;
  }

  // Intensities with per-region jitter and pixel noise, quantized to 8 bits.
  const double jb = opt.bg_level + rng.uniform(-opt.level_jitter, opt.level_jitter);
  const double jo = opt.organ_level + rng.uniform(-opt.level_jitter, opt.level_jitter);
  const double jt = opt.tumor_level + rng.uniform(-opt.level_jitter, opt.level_jitter);
  rec.image.resize(rec.label.size());
  for (size_t i = 0; i < rec.label.size(); ++i) {
    double v = rec.label[i] == kTumor ? jt : (rec.label[i] == kOrgan ? jo : jb);
    v += rng.normal(0.0, opt.noise_std);
    v = std::min(1.0, std::max(0.0, v));
    rec.image[i] = static_cast<uint8_t>(std::lround(v * 255.0));
  }
  return rec;
}

inline Dataset generate_dataset(int64_t n, int64_t h, int64_t w, uint64_t seed, const GenOptions& opt = {}) {
  CMA_CHECK_INPUT(n >= 20, "need at least 20 samples, got " << n);
  CMA_CHECK_INPUT(h == w && h >= 32, "degenerate size: require square images with side >= 32");
  Dataset ds;
  ds.manifest.seed = seed;
  ds.manifest.n = n;
  ds.manifest.height = h;
  ds.manifest.width = w;
  ds.manifest.noise_std = opt.noise_std;
  ds.samples.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    SampleRecord rec = generate_sample(h, w, Rng::derive(seed, static_cast<uint64_t>(i)), opt);
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%08lld", static_cast<long long>(i));
    rec.id = buf;
    ds.manifest.entries.push_back({rec.id, Split::Train, true});
    ds.samples.push_back(std::move(rec));
  }
  ds.manifest.content_hash = content_hash(ds.manifest, ds.samples);
  return ds;
}

// Deterministic seeded partition honoring (train, val, test) ratios.
inline void split_dataset(Dataset& ds, double train_ratio, double val_ratio, double test_ratio) {
  CMA_CHECK_INPUT(std::abs(train_ratio + val_ratio + test_ratio - 1.0) <= 1e-9,
                  "split ratios must sum to 1");
  CMA_CHECK_INPUT(train_ratio >= 0 && val_ratio >= 0 && test_ratio >= 0, "negative split ratio");
  const int64_t n = static_cast<int64_t>(ds.manifest.entries.size());
  std::vector<size_t> order(static_cast<size_t>(n));
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(Rng::derive(ds.manifest.seed, 0x5917));
  rng.shuffle(order);
  const int64_t n_val = static_cast<int64_t>(val_ratio * static_cast<double>(n));
  const int64_t n_test = static_cast<int64_t>(test_ratio * static_cast<double>(n));
  for (int64_t i = 0; i < n; ++i) {
    auto& e = ds.manifest.entries[order[static_cast<size_t>(i)]];
    if (i < n_val)
      e.split = Split::Val;
    else if (i < n_val + n_test)
      e.split = Split::Test;
    else
      e.split = Split::Train;
    if (e.split != Split::Train) e.labeled = false;
  }
  ds.manifest.content_hash = content_hash(ds.manifest, ds.samples);
}

// Exactly floor(fraction * |train|) training samples keep their labels.
inline void mark_labeled_fraction(Dataset& ds, double fraction, uint64_t seed) {
  CMA_CHECK_INPUT(fraction > 0.0 && fraction <= 1.0, "labeled fraction must be in (0, 1], got " << fraction);
  std::vector<size_t> train;
  for (size_t i = 0; i < ds.manifest.entries.size(); ++i)
    if (ds.manifest.entries[i].split == Split::Train) train.push_back(i);
  Rng rng(Rng::derive(seed, 0x1abe1));
  rng.shuffle(train);
  const size_t n_labeled = static_cast<size_t>(fraction * static_cast<double>(train.size()));
  for (size_t i = 0; i < train.size(); ++i)
    ds.manifest.entries[train[i]].labeled = i < n_labeled;
  ds.manifest.content_hash = content_hash(ds.manifest, ds.samples);
}

// ---------------------------------------------------------------------------
// Directory layout: images/<id>.png, masks/<id>.png, manifest.json

inline void save_dataset(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    io::Image8 img{ds.manifest.height, ds.manifest.width, s.image};
    io::Image8 msk{ds.manifest.height, ds.manifest.width, s.label};
    io::write_gray8((fs::path(dir) / "images" / (s.id + ".png")).string(), img);
    io::write_palette8((fs::path(dir) / "masks" / (s.id + ".png")).string(), msk, kNumClasses);
  }
  json j;
  j["seed"] = ds.manifest.seed;
  j["n"] = ds.manifest.n;
  j["height"] = ds.manifest.height;
  j["width"] = ds.manifest.width;
  j["noise_std"] = ds.manifest.noise_std;
  j["content_hash"] = ds.manifest.content_hash;
  json samples = json::array();
  for (const auto& e : ds.manifest.entries) {
    samples.push_back({{"id", e.id}, {"split", split_name(e.split)}, {"labeled", e.labeled}});
  }
  j["samples"] = samples;
  std::ofstream out(fs::path(dir) / "manifest.json");
  CMA_CHECK(out.good(), IoError, "cannot write manifest.json under " << dir);
  out << j.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path mpath = fs::path(dir) / "manifest.json";
  CMA_CHECK(fs::exists(mpath), DataError, "no manifest.json in " << dir);
  std::ifstream in(mpath);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("malformed manifest.json: " + std::string(e.what()));
  }
  Dataset ds;
  ds.manifest.seed = j.value("seed", uint64_t{0});
  ds.manifest.n = j.at("n").get<int64_t>();
  ds.manifest.height = j.at("height").get<int64_t>();
  ds.manifest.width = j.at("width").get<int64_t>();
  ds.manifest.noise_std = j.value("noise_std", 0.0);
  const std::string stored_hash = j.value("content_hash", "");
  for (const auto& e : j.at("samples")) {
    ManifestEntry entry;
    entry.id = e.at("id").get<std::string>();
    entry.split = split_from_name(e.at("split").get<std::string>());
    entry.labeled = e.at("labeled").get<bool>();
    ds.manifest.entries.push_back(entry);
  }
  CMA_CHECK(static_cast<int64_t>(ds.manifest.entries.size()) == ds.manifest.n, DataError,
            "manifest sample count mismatch");
  for (const auto& e : ds.manifest.entries) {
    SampleRecord rec;
    rec.id = e.id;
    io::Image8 img = io::read_gray8((fs::path(dir) / "images" / (e.id + ".png")).string());
    io::Image8 msk = io::read_mask8((fs::path(dir) / "masks" / (e.id + ".png")).string());
    CMA_CHECK(img.height == ds.manifest.height && img.width == ds.manifest.width, DataError,
              "image " << e.id << " has wrong dimensions");
    CMA_CHECK(msk.height == ds.manifest.height && msk.width == ds.manifest.width, DataError,
              "mask " << e.id << " has wrong dimensions");
    for (uint8_t v : msk.pixels)
      CMA_CHECK(v < kNumClasses, DataError, "mask " << e.id << " has out-of-range label " << int(v));
    rec.image = std::move(img.pixels);
    rec.label = std::move(msk.pixels);
    ds.samples.push_back(std::move(rec));
  }
  ds.manifest.content_hash = content_hash(ds.manifest, ds.samples);
  if (!stored_hash.empty())
    CMA_CHECK(stored_hash == ds.manifest.content_hash, DataError,
              "dataset content hash mismatch: manifest says " << stored_hash << ", computed "
                                                              << ds.manifest.content_hash);
  return ds;
}

}  // namespace cma::data
