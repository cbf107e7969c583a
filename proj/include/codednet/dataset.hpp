#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "codednet/network.hpp"

namespace codednet::dataset {

using network::Dataset;

// Synthetic K-class point cloud: each class is an even mixture of two
// Gaussian components whose means sit on the radius-2 hypersphere, with
// independent per-coordinate noise of the given spread. Samples are laid out
// class-major (all of class 0, then class 1, ...), deterministically per seed.
Dataset generate_blobs(int k_classes, int dim, int per_class, double spread,
                       std::uint64_t seed);

struct Split {
  Dataset train;
  Dataset val;
};

// Seeded, stratified, disjoint split: per class, round(fraction * count)
// samples go to train and the rest to val.
Split split_dataset(const Dataset& ds, double train_fraction, std::uint64_t seed);

// New dataset holding copies of the given rows, in the given order.
Dataset take(const Dataset& ds, const std::vector<int>& rows);

// Rows whose label equals k, in dataset order.
std::vector<int> rows_of_class(const Dataset& ds, int k);
Dataset subset_of_class(const Dataset& ds, int k);

// File of fixed-size records: 1 label byte followed by C*H*W pixel bytes
// (channel-major). Pixels are scaled to [0,1]. Throws on a length that is not
// a whole number of records or on a label >= K. An empty file yields a
// zero-sample dataset and a warning on stderr.
Dataset load_binary_images(const std::string& path, int channels, int height,
                           int width, int k_classes);

// Per-channel mean / standard deviation. For rank-2 data every feature is its
// own channel. A zero-variance channel reports sd = 1 so standardization is a
// pure shift there.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> sd;
};

ChannelStats channel_stats(const Dataset& ds);

// x[m,c,...] <- (x[m,c,...] - mean[c]) / sd[c], in place.
void standardize(Dataset& ds, const ChannelStats& stats);

}  // namespace codednet::dataset
