#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "carso/nets.hpp"
#include "carso/rng.hpp"
#include "carso/tensor.hpp"

namespace carso::data {

// Images in (N, C, H, W) layout scaled to [0,1]; labels are class indices.
struct Dataset {
  TensorData<float> images;
  std::vector<int> labels;
  int classes = 10;

  int size() const { return images.shape.empty() ? 0 : images.shape[0]; }
};

// IDX container readers (big-endian header, u8 payload). Malformed files are
// rejected with the offending byte offset in the message.
TensorData<std::uint8_t> ingest_idx_images(const std::string& path);
std::vector<std::uint8_t> ingest_idx_labels(const std::string& path);

void write_idx_images(const std::string& path, const TensorData<std::uint8_t>& imgs);
void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels);

// u8 -> float/255 with a (N,1,H,W) shape; validates label range against classes
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 int classes = 10);

// per-channel mean/std over a (training) split; std floored away from zero
DatasetStats compute_stats(const Dataset& d);

// Deterministic synthetic 10-class benchmark: class-keyed sinusoidal texture
// plus pixel noise. A stand-in with the same ingestion path and tensor
// layout as the usual 28x28 digit sets.
Dataset make_synthetic(int n, int classes, int h, int w, Rng rng);

// writes train/test IDX pairs (train-images.idx3-ubyte etc.) under dir
void write_synthetic_idx(const std::string& dir, int n_train, int n_test,
                         std::uint64_t seed);

}  // namespace carso::data
