#include "codednet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "codednet/rng.hpp"

namespace codednet::dataset {

Dataset generate_blobs(int k_classes, int dim, int per_class, double spread,
                       std::uint64_t seed) {
  if (k_classes < 2) throw std::invalid_argument("generate_blobs: need K >= 2");
  if (dim < 1 || per_class < 1)
    throw std::invalid_argument("generate_blobs: non-positive size");
  if (spread < 0.0) throw std::invalid_argument("generate_blobs: negative spread");

  Rng rng(seed);

  // Two component means per class, each a random direction scaled to radius 2.
  std::vector<std::vector<double>> means;
  means.reserve(static_cast<std::size_t>(k_classes) * 2);
  for (int k = 0; k < k_classes * 2; ++k) {
    std::vector<double> m(static_cast<std::size_t>(dim));
    double norm_sq = 0.0;
    for (double& v : m) {
      v = rng.normal();
      norm_sq += v * v;
    }
    double norm = std::sqrt(norm_sq);
    if (norm < 1e-12) {
      m.assign(m.size(), 0.0);
      m[0] = 1.0;
      norm = 1.0;
    }
    for (double& v : m) v *= 2.0 / norm;
    means.push_back(std::move(m));
  }

  const std::int64_t m_total = static_cast<std::int64_t>(k_classes) * per_class;
  Dataset ds;
  ds.k_classes = k_classes;
  ds.x = Tensor<double>::zeros({m_total, dim});
  ds.labels.reserve(static_cast<std::size_t>(m_total));
  std::size_t row = 0;
  for (int k = 0; k < k_classes; ++k)
    for (int i = 0; i < per_class; ++i, ++row) {
      const std::vector<double>& mean =
          means[static_cast<std::size_t>(k) * 2 + static_cast<std::size_t>(i % 2)];
      double* out = ds.x.data.data() + row * static_cast<std::size_t>(dim);
      for (int j = 0; j < dim; ++j)
        out[j] = mean[static_cast<std::size_t>(j)] + spread * rng.normal();
      ds.labels.push_back(k);
    }
  return ds;
}

Dataset take(const Dataset& ds, const std::vector<int>& rows) {
  Dataset out;
  out.k_classes = ds.k_classes;
  if (rows.empty()) return out;
  std::vector<std::int64_t> shape = ds.x.shape;
  shape[0] = static_cast<std::int64_t>(rows.size());
  out.x = Tensor<double>::zeros(shape);
  out.labels.reserve(rows.size());
  const std::int64_t per = ds.x.numel() / ds.x.dim(0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int r = rows[i];
    if (r < 0 || r >= ds.size()) throw std::out_of_range("take: row out of range");
    std::copy_n(ds.x.data.begin() + r * per, per,
                out.x.data.begin() + static_cast<std::int64_t>(i) * per);
    out.labels.push_back(ds.labels[static_cast<std::size_t>(r)]);
  }
  return out;
}

std::vector<int> rows_of_class(const Dataset& ds, int k) {
  std::vector<int> rows;
  for (std::size_t i = 0; i < ds.labels.size(); ++i)
    if (ds.labels[i] == k) rows.push_back(static_cast<int>(i));
  return rows;
}

Dataset subset_of_class(const Dataset& ds, int k) {
  return take(ds, rows_of_class(ds, k));
}

Split split_dataset(const Dataset& ds, double train_fraction, std::uint64_t seed) {
  if (train_fraction <= 0.0 || train_fraction >= 1.0)
    throw std::invalid_argument("split_dataset: fraction must lie in (0, 1)");
  Rng rng(seed);
  std::vector<int> train_rows, val_rows;
  for (int k = 0; k < ds.k_classes; ++k) {
    std::vector<int> rows = rows_of_class(ds, k);
    rng.shuffle(rows.begin(), rows.end());
    const std::size_t n_train = static_cast<std::size_t>(
        std::llround(train_fraction * static_cast<double>(rows.size())));
    for (std::size_t i = 0; i < rows.size(); ++i)
      (i < n_train ? train_rows : val_rows).push_back(rows[i]);
  }
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(val_rows.begin(), val_rows.end());
  return {take(ds, train_rows), take(ds, val_rows)};
}

Dataset load_binary_images(const std::string& path, int channels, int height,
                           int width, int k_classes) {
  if (channels < 1 || height < 1 || width < 1 || k_classes < 2)
    throw std::invalid_argument("load_binary_images: bad dimensions");
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("load_binary_images: cannot open " + path);
  const std::int64_t file_size = static_cast<std::int64_t>(f.tellg());
  f.seekg(0);

  Dataset ds;
  ds.k_classes = k_classes;
  if (file_size == 0) {
    std::cerr << "warning: " << path << " is empty; dataset has zero samples\n";
    return ds;
  }
  const std::int64_t pixels = static_cast<std::int64_t>(channels) * height * width;
  const std::int64_t record = 1 + pixels;
  if (file_size % record != 0)
    throw std::runtime_error("load_binary_images: " + path + " holds " +
                             std::to_string(file_size) +
                             " bytes, not a whole number of " +
                             std::to_string(record) + "-byte records");
  const std::int64_t m = file_size / record;
  ds.x = Tensor<double>::zeros({m, channels, height, width});
  ds.labels.reserve(static_cast<std::size_t>(m));
  std::vector<unsigned char> buf(static_cast<std::size_t>(record));
  for (std::int64_t i = 0; i < m; ++i) {
    f.read(reinterpret_cast<char*>(buf.data()), record);
    if (!f) throw std::runtime_error("load_binary_images: read failed in " + path);
    const int label = buf[0];
    if (label >= k_classes)
      throw std::runtime_error("load_binary_images: record " + std::to_string(i) +
                               " has label " + std::to_string(label) + " >= K=" +
                               std::to_string(k_classes));
    ds.labels.push_back(label);
    double* out = ds.x.data.data() + i * pixels;
    for (std::int64_t j = 0; j < pixels; ++j)
      out[j] = static_cast<double>(buf[static_cast<std::size_t>(1 + j)]) / 255.0;
  }
  return ds;
}

ChannelStats channel_stats(const Dataset& ds) {
  ChannelStats st;
  if (ds.size() == 0) return st;
  const std::int64_t m = ds.x.dim(0);
  const std::int64_t c = ds.x.dim(1);
  const std::int64_t inner = ds.x.numel() / (m * c);
  st.mean.assign(static_cast<std::size_t>(c), 0.0);
  st.sd.assign(static_cast<std::size_t>(c), 0.0);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double* p = ds.x.data.data() + (i * c + ch) * inner;
      for (std::int64_t j = 0; j < inner; ++j)
        st.mean[static_cast<std::size_t>(ch)] += p[j];
    }
  const double count = static_cast<double>(m * inner);
  for (double& v : st.mean) v /= count;
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double* p = ds.x.data.data() + (i * c + ch) * inner;
      const double mu = st.mean[static_cast<std::size_t>(ch)];
      for (std::int64_t j = 0; j < inner; ++j)
        st.sd[static_cast<std::size_t>(ch)] += (p[j] - mu) * (p[j] - mu);
    }
  for (double& v : st.sd) {
    v = std::sqrt(v / count);
    if (v < 1e-12) v = 1.0;
  }
  return st;
}

void standardize(Dataset& ds, const ChannelStats& stats) {
  if (ds.size() == 0) return;
  const std::int64_t m = ds.x.dim(0);
  const std::int64_t c = ds.x.dim(1);
  if (static_cast<std::int64_t>(stats.mean.size()) != c ||
      static_cast<std::int64_t>(stats.sd.size()) != c)
    throw std::invalid_argument("standardize: stats width mismatch");
  const std::int64_t inner = ds.x.numel() / (m * c);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double* p = ds.x.data.data() + (i * c + ch) * inner;
      const double mu = stats.mean[static_cast<std::size_t>(ch)];
      const double sd = stats.sd[static_cast<std::size_t>(ch)];
      for (std::int64_t j = 0; j < inner; ++j) p[j] = (p[j] - mu) / sd;
    }
}

}  // namespace codednet::dataset
