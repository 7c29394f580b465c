#include "carso/data.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace carso::data {

namespace {

constexpr std::uint32_t kMagicImages = 0x00000803;  // u8, rank 3
constexpr std::uint32_t kMagicLabels = 0x00000801;  // u8, rank 1

std::uint32_t read_be32(std::ifstream& f, const std::string& path, std::size_t offset) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (!f)
    throw std::runtime_error("idx: '" + path + "' truncated at byte offset " +
                             std::to_string(offset));
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

void write_be32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

void read_payload(std::ifstream& f, const std::string& path, std::size_t offset,
                  unsigned char* dst, std::size_t n) {
  f.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(f.gcount()) != n)
    throw std::runtime_error("idx: '" + path + "' truncated at byte offset " +
                             std::to_string(offset + static_cast<std::size_t>(f.gcount())) +
                             " (expected " + std::to_string(n) + " payload bytes)");
  f.peek();
  if (!f.eof())
    throw std::runtime_error("idx: '" + path + "' has trailing bytes after offset " +
                             std::to_string(offset + n));
}

}  // namespace

TensorData<std::uint8_t> ingest_idx_images(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("idx: cannot open '" + path + "'");
  std::uint32_t magic = read_be32(f, path, 0);
  if (magic != kMagicImages)
    throw std::runtime_error("idx: '" + path + "' bad image magic 0x" +
                             [&] { char b[16]; std::snprintf(b, 16, "%08x", magic); return std::string(b); }() +
                             " at byte offset 0 (want 0x00000803)");
  std::uint32_t n = read_be32(f, path, 4);
  std::uint32_t h = read_be32(f, path, 8);
  std::uint32_t w = read_be32(f, path, 12);
  if (n == 0 || h == 0 || w == 0)
    throw std::runtime_error("idx: '" + path + "' zero dimension in header (bytes 4..15)");
  TensorData<std::uint8_t> t({static_cast<int>(n), static_cast<int>(h), static_cast<int>(w)});
  read_payload(f, path, 16, t.v.data(), t.v.size());
  return t;
}

std::vector<std::uint8_t> ingest_idx_labels(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("idx: cannot open '" + path + "'");
  std::uint32_t magic = read_be32(f, path, 0);
  if (magic != kMagicLabels)
    throw std::runtime_error("idx: '" + path + "' bad label magic 0x" +
                             [&] { char b[16]; std::snprintf(b, 16, "%08x", magic); return std::string(b); }() +
                             " at byte offset 0 (want 0x00000801)");
  std::uint32_t n = read_be32(f, path, 4);
  if (n == 0) throw std::runtime_error("idx: '" + path + "' zero-length label file");
  std::vector<std::uint8_t> labels(n);
  read_payload(f, path, 8, labels.data(), labels.size());
  return labels;
}

void write_idx_images(const std::string& path, const TensorData<std::uint8_t>& imgs) {
  if (imgs.shape.size() != 3) throw ShapeError("idx writer: images must be (N,H,W)");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("idx: cannot write '" + path + "'");
  write_be32(f, kMagicImages);
  for (int d : imgs.shape) write_be32(f, static_cast<std::uint32_t>(d));
  f.write(reinterpret_cast<const char*>(imgs.v.data()),
          static_cast<std::streamsize>(imgs.v.size()));
  if (!f) throw std::runtime_error("idx: short write to '" + path + "'");
}

void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("idx: cannot write '" + path + "'");
  write_be32(f, kMagicLabels);
  write_be32(f, static_cast<std::uint32_t>(labels.size()));
  f.write(reinterpret_cast<const char*>(labels.data()),
          static_cast<std::streamsize>(labels.size()));
  if (!f) throw std::runtime_error("idx: short write to '" + path + "'");
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 int classes) {
  auto raw = ingest_idx_images(images_path);
  auto raw_labels = ingest_idx_labels(labels_path);
  if (static_cast<std::size_t>(raw.shape[0]) != raw_labels.size())
    throw std::runtime_error("idx: " + std::to_string(raw.shape[0]) + " images vs " +
                             std::to_string(raw_labels.size()) + " labels");
  Dataset d;
  d.classes = classes;
  d.images = TensorData<float>({raw.shape[0], 1, raw.shape[1], raw.shape[2]});
  for (std::size_t i = 0; i < raw.v.size(); ++i)
    d.images.v[i] = static_cast<float>(raw.v[i]) / 255.0f;
  d.labels.resize(raw_labels.size());
  for (std::size_t i = 0; i < raw_labels.size(); ++i) {
    if (raw_labels[i] >= classes)
      throw std::runtime_error("idx: label " + std::to_string(int(raw_labels[i])) +
                               " at index " + std::to_string(i) + " exceeds " +
                               std::to_string(classes) + " classes");
    d.labels[i] = raw_labels[i];
  }
  return d;
}

DatasetStats compute_stats(const Dataset& d) {
  if (d.size() == 0) throw std::runtime_error("compute_stats: empty dataset");
  const int N = d.images.shape[0], C = d.images.shape[1];
  const std::size_t spatial =
      static_cast<std::size_t>(d.images.shape[2]) * d.images.shape[3];
  DatasetStats s;
  s.mean.assign(C, 0.0);
  s.std.assign(C, 0.0);
  const std::size_t m = static_cast<std::size_t>(N) * spatial;
  for (int in = 0; in < N; ++in)
    for (int c = 0; c < C; ++c) {
      const float* row = d.images.v.data() + (static_cast<std::size_t>(in) * C + c) * spatial;
      for (std::size_t p = 0; p < spatial; ++p) s.mean[c] += row[p];
    }
  for (auto& v : s.mean) v /= static_cast<double>(m);
  for (int in = 0; in < N; ++in)
    for (int c = 0; c < C; ++c) {
      const float* row = d.images.v.data() + (static_cast<std::size_t>(in) * C + c) * spatial;
      for (std::size_t p = 0; p < spatial; ++p) {
        double dd = row[p] - s.mean[c];
        s.std[c] += dd * dd;
      }
    }
  for (auto& v : s.std) v = std::max(std::sqrt(v / static_cast<double>(m)), 1e-4);
  return s;
}

Dataset make_synthetic(int n, int classes, int h, int w, Rng rng) {
  if (n < 1 || classes < 2) throw std::invalid_argument("make_synthetic: bad sizes");
  Dataset d;
  d.classes = classes;
  d.images = TensorData<float>({n, 1, h, w});
  d.labels.resize(n);
  const double pi = 3.14159265358979323846;
  for (int i = 0; i < n; ++i) {
    const int cls = static_cast<int>(rng.next_u64() % classes);
    d.labels[i] = cls;
    // class-keyed spatial frequency pair plus a per-image phase jitter
    const double fx = 1.0 + cls % 5;
    const double fy = 1.0 + cls / 5;
    const double phase = rng.uniform(0.0, 0.08);
    float* img = d.images.v.data() + static_cast<std::size_t>(i) * h * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double u = static_cast<double>(x) / w, v = static_cast<double>(y) / h;
        double val = 0.5 + 0.26 * std::sin(2 * pi * (fx * u + phase)) *
                               std::cos(2 * pi * (fy * v + phase)) +
                     rng.uniform(-0.08, 0.08);
        img[y * w + x] = static_cast<float>(std::min(1.0, std::max(0.0, val)));
      }
  }
  return d;
}

void write_synthetic_idx(const std::string& dir, int n_train, int n_test,
                         std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  auto dump = [&](const Dataset& d, const std::string& stem) {
    const int n = d.size(), h = d.images.shape[2], w = d.images.shape[3];
    TensorData<std::uint8_t> u({n, h, w});
    for (std::size_t i = 0; i < u.v.size(); ++i)
      u.v[i] = static_cast<std::uint8_t>(std::lround(d.images.v[i] * 255.0f));
    std::vector<std::uint8_t> l(d.labels.begin(), d.labels.end());
    write_idx_images(dir + "/" + stem + "-images.idx3-ubyte", u);
    write_idx_labels(dir + "/" + stem + "-labels.idx1-ubyte", l);
  };
  dump(make_synthetic(n_train, 10, 28, 28, Rng(seed, 0)), "train");
  dump(make_synthetic(n_test, 10, 28, 28, Rng(seed, 1)), "t10k");
}

}  // namespace carso::data
