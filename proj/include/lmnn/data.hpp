#pragma once

// Datasets: the synthetic noisy sine task and MNIST in IDX format, plus
// seeded subsetting and batching.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "lmnn/errors.hpp"
#include "lmnn/net.hpp"
#include "lmnn/rng.hpp"

namespace lmnn {

enum class TaskKind { Regression, Classification };

struct Dataset {
  std::string name;
  TaskKind kind = TaskKind::Regression;
  std::uint64_t seed = 0;
  Shape input_shape;
  Batch samples;

  std::size_t size() const { return samples.count; }
};

/// Index of the largest target entry (the class of a one-hot row).
inline std::size_t class_of(const Dataset& ds, std::size_t i) {
  const auto t = ds.samples.target(i);
  return static_cast<std::size_t>(std::max_element(t.begin(), t.end()) - t.begin());
}

/// x ~ U[lo, hi], y = sin(x) + sigma * eps with eps ~ N(0, 1). Each sample
/// draws x and then one Box-Muller normal from the same stream, whatever sigma is.
inline Dataset gen_sine(std::size_t n, double lo, double hi, double sigma, std::uint64_t seed) {
  if (n == 0) throw Error(ErrorCode::InvalidRange, "sine dataset needs at least one sample");
  if (!(lo < hi)) throw Error(ErrorCode::InvalidRange, "sine range must satisfy lo < hi");
  if (!(sigma >= 0.0)) throw Error(ErrorCode::InvalidRange, "noise sigma must be >= 0");
  Rng rng(seed);
  Dataset ds{"sine", TaskKind::Regression, seed, Shape{1, 1, 1}, {n, 1, 1, {}, {}}};
  ds.samples.inputs.resize(n);
  ds.samples.targets.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.uniform(lo, hi);
    const double eps = rng.normal();
    ds.samples.inputs[i] = x;
    ds.samples.targets[i] = std::sin(x) + sigma * eps;
  }
  return ds;
}

inline void write_sine_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out << "x,y\n";
  char buf[64];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", ds.samples.inputs[i * ds.samples.input_size],
                  ds.samples.targets[i * ds.samples.target_size]);
    out << buf;
  }
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path);
}

namespace idx {

inline constexpr std::uint32_t kImageMagic = 2051;
inline constexpr std::uint32_t kLabelMagic = 2049;

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t pos) {
  return (std::uint32_t{bytes[pos]} << 24) | (std::uint32_t{bytes[pos + 1]} << 16) |
         (std::uint32_t{bytes[pos + 2]} << 8) | std::uint32_t{bytes[pos + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

struct Images {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols
};

inline Images parse_images(std::span<const std::uint8_t> bytes, const std::string& what = "image file") {
  if (bytes.size() < 16) throw Error(ErrorCode::TruncatedFile, what + " shorter than its 16-byte header");
  if (const auto magic = read_be32(bytes, 0); magic != kImageMagic)
    throw Error(ErrorCode::BadMagic, what + " has magic " + std::to_string(magic) + ", expected 2051");
  Images img{read_be32(bytes, 4), read_be32(bytes, 8), read_be32(bytes, 12), {}};
  const std::size_t need = img.count * img.rows * img.cols;
  if (bytes.size() - 16 < need)
    throw Error(ErrorCode::TruncatedFile, what + " holds " + std::to_string(bytes.size() - 16) +
                                              " pixel bytes, header promises " + std::to_string(need));
  img.pixels.assign(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(need));
  return img;
}

inline std::vector<std::uint8_t> parse_labels(std::span<const std::uint8_t> bytes, const std::string& what = "label file") {
  if (bytes.size() < 8) throw Error(ErrorCode::TruncatedFile, what + " shorter than its 8-byte header");
  if (const auto magic = read_be32(bytes, 0); magic != kLabelMagic)
    throw Error(ErrorCode::BadMagic, what + " has magic " + std::to_string(magic) + ", expected 2049");
  const std::size_t count = read_be32(bytes, 4);
  if (bytes.size() - 8 < count)
    throw Error(ErrorCode::TruncatedFile, what + " holds " + std::to_string(bytes.size() - 8) +
                                              " labels, header promises " + std::to_string(count));
  return {bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(count)};
}

inline std::vector<std::uint8_t> encode_images(const Images& img) {
  std::vector<std::uint8_t> out;
  out.reserve(16 + img.pixels.size());
  put_be32(out, kImageMagic);
  put_be32(out, static_cast<std::uint32_t>(img.count));
  put_be32(out, static_cast<std::uint32_t>(img.rows));
  put_be32(out, static_cast<std::uint32_t>(img.cols));
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline std::vector<std::uint8_t> encode_labels(std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + labels.size());
  put_be32(out, kLabelMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path);
}

}  // namespace idx

inline constexpr std::array<const char*, 4> kMnistFileNames = {
    "train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"};

/// Pixels scaled by 1/255, labels one-hot over 10 classes.
inline Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = idx::parse_images(idx::read_file(images_path), images_path);
  const auto labels = idx::parse_labels(idx::read_file(labels_path), labels_path);
  if (img.count != labels.size())
    throw Error(ErrorCode::CountMismatch, std::to_string(img.count) + " images but " + std::to_string(labels.size()) +
                                              " labels");
  constexpr std::size_t kClasses = 10;
  const std::size_t d = img.rows * img.cols;
  Dataset ds{"mnist", TaskKind::Classification, 0, Shape{1, img.rows, img.cols}, {img.count, d, kClasses, {}, {}}};
  ds.samples.inputs.resize(img.count * d);
  ds.samples.targets.assign(img.count * kClasses, 0.0);
  for (std::size_t k = 0; k < img.pixels.size(); ++k) ds.samples.inputs[k] = static_cast<double>(img.pixels[k]) / 255.0;
  for (std::size_t i = 0; i < img.count; ++i) {
    if (labels[i] >= kClasses)
      throw Error(ErrorCode::InvalidArgument, "label " + std::to_string(labels[i]) + " outside 0..9");
    ds.samples.targets[i * kClasses + labels[i]] = 1.0;
  }
  return ds;
}

inline Dataset select(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out{ds.name, ds.kind, ds.seed, ds.input_shape, {indices.size(), ds.samples.input_size, ds.samples.target_size, {}, {}}};
  out.samples.inputs.reserve(indices.size() * ds.samples.input_size);
  out.samples.targets.reserve(indices.size() * ds.samples.target_size);
  for (std::size_t i : indices) {
    const auto x = ds.samples.input(i);
    const auto t = ds.samples.target(i);
    out.samples.inputs.insert(out.samples.inputs.end(), x.begin(), x.end());
    out.samples.targets.insert(out.samples.targets.end(), t.begin(), t.end());
  }
  return out;
}

/// First n entries of a seeded shuffle. For classification the prefix is
/// filtered so per-class counts differ by at most one (as far as the
/// classes have samples to give). Order follows the shuffle.
inline Dataset subset(const Dataset& ds, std::size_t n, std::uint64_t seed) {
  if (n > ds.size())
    throw Error(ErrorCode::SubsetTooLarge, "asked for " + std::to_string(n) + " of " + std::to_string(ds.size()) +
                                               " samples");
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);

  std::vector<std::size_t> chosen;
  if (ds.kind == TaskKind::Regression) {
    chosen.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  } else {
    const std::size_t k = ds.samples.target_size;
    std::vector<std::size_t> avail(k, 0), quota(k, 0), taken(k, 0);
    for (std::size_t i = 0; i < ds.size(); ++i) ++avail[class_of(ds, i)];
    // Water-fill: hand out one slot per class per round while classes have samples left.
    std::size_t left = n;
    while (left > 0) {
      for (std::size_t c = 0; c < k && left > 0; ++c)
        if (quota[c] < avail[c]) {
          ++quota[c];
          --left;
        }
    }
    chosen.reserve(n);
    for (std::size_t i : order) {
      const std::size_t c = class_of(ds, i);
      if (taken[c] < quota[c]) {
        ++taken[c];
        chosen.push_back(i);
      }
    }
  }
  Dataset out = select(ds, chosen);
  out.seed = seed;
  return out;
}

/// Seeded shuffle of the whole set cut into consecutive batches; the last may be short.
inline std::vector<Batch> batches(const Dataset& ds, std::size_t batch_size, std::uint64_t epoch_seed) {
  if (batch_size == 0) throw Error(ErrorCode::InvalidArgument, "batch size must be positive");
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(epoch_seed);
  rng.shuffle(order);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t stop = std::min(order.size(), start + batch_size);
    out.push_back(select(ds, std::span<const std::size_t>(order).subspan(start, stop - start)).samples);
  }
  return out;
}

}  // namespace lmnn
