#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fsml/rng.hpp"
#include "fsml/tensor.hpp"

namespace fsml {

/// Labeled images with class ids contiguous from 0. Views produced by
/// split_classes are Datasets too; `global_class` and `source_index` map them
/// back to the dataset they were cut from.
struct Dataset {
  std::string name;
  std::string source;
  Shape image_shape;  // [c, h, w]
  std::vector<Tensor<float>> images;
  std::vector<std::uint32_t> labels;
  std::vector<std::vector<std::size_t>> class_index;
  std::vector<std::uint32_t> global_class;
  std::vector<std::size_t> source_index;

  std::size_t size() const noexcept { return images.size(); }
  std::size_t n_classes() const noexcept { return class_index.size(); }
};

/// Builds the class index; throws ContractError unless every class in
/// [0, n_classes) has at least one sample.
Dataset make_dataset(std::string name, Shape image_shape, std::vector<Tensor<float>> images,
                     std::vector<std::uint32_t> labels, std::size_t n_classes);

/// FSDS: "FSDS", u16 version, u32 n_classes, u32 n_samples, u32 c, h, w, then
/// per sample a u32 class id and c*h*w little-endian float32 values in [0, 1].
std::vector<std::uint8_t> encode_fsds(const Dataset& ds);
Dataset decode_fsds(std::span<const std::uint8_t> bytes, const std::string& source = "");
void save_dataset(const std::string& path, const Dataset& ds);
/// Throws FormatError (with byte offset) on bad magic, version, truncation,
/// or out-of-range content; no partial Dataset is ever returned.
Dataset load_dataset(const std::string& path);

inline constexpr std::uint16_t kDatasetVersion = 1;

struct SplitSpec {
  std::vector<std::uint32_t> base_classes;
  std::vector<std::uint32_t> val_classes;
  std::vector<std::uint32_t> novel_classes;

  /// First `base` ids, then `val`, then `novel`.
  static SplitSpec contiguous(std::size_t base, std::size_t val, std::size_t novel);
};

struct SplitViews {
  Dataset base;
  Dataset val;
  Dataset novel;
};

/// Throws ConfigError on overlapping or out-of-range class sets.
SplitViews split_classes(const Dataset& ds, const SplitSpec& spec);
/// View over a subset of classes, relabeled 0..n-1 in the order given.
Dataset class_view(const Dataset& ds, std::span<const std::uint32_t> classes,
                   const std::string& name);

struct EpisodeSpec {
  std::size_t ways = 5;
  std::size_t shots = 1;
  std::size_t queries = 16;

  void validate() const;
};

struct Episode {
  std::vector<std::size_t> support;  // sample indices into the view
  std::vector<int> support_labels;   // local labels 0..ways-1
  std::vector<std::size_t> query;
  std::vector<int> query_labels;
  std::vector<std::uint32_t> class_map;  // local label -> view class id
};

/// Uniform class choice without replacement, then shots+queries samples per
/// class without replacement; the first `shots` go to the support set.
/// Throws SamplingError naming the deficit.
Episode sample_episode(const Dataset& view, const EpisodeSpec& spec, Rng& rng);

template <class Real>
struct LabeledBatch {
  Tensor<Real> images;  // [B, c, h, w]
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
};

template <class Real>
LabeledBatch<Real> gather_batch(const Dataset& ds, std::span<const std::size_t> indices,
                                std::span<const int> labels);
/// Batch with the dataset's own class ids as labels.
template <class Real>
LabeledBatch<Real> gather_batch(const Dataset& ds, std::span<const std::size_t> indices);

struct SyntheticSpec {
  std::size_t n_classes = 100;
  std::size_t samples_per_class = 20;
  std::size_t channels = 1;
  std::size_t image_extent = 32;
  double cluster_std = 0.1;
  double class_separation = 1.0;
  std::uint64_t seed = 0;
  /// Templates are random grids of this size, bilinearly upsampled.
  std::size_t template_grid = 8;

  void validate() const;
};

/// Each class is an isotropic Gaussian blob (std `cluster_std`, clipped to
/// [0, 1]) around a smooth random template; templates are redrawn until they
/// lie at least `class_separation` apart in pixel space.
Dataset gen_synthetic(const SyntheticSpec& spec);
/// The class templates gen_synthetic uses for `spec`.
std::vector<Tensor<float>> synthetic_templates(const SyntheticSpec& spec);

}  // namespace fsml
