#include "fsml/data.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "binio.hpp"

namespace fsml {

Dataset make_dataset(std::string name, Shape image_shape, std::vector<Tensor<float>> images,
                     std::vector<std::uint32_t> labels, std::size_t n_classes) {
  if (images.size() != labels.size()) {
    throw ContractError("dataset has " + std::to_string(images.size()) + " images but " +
                        std::to_string(labels.size()) + " labels");
  }
  Dataset ds;
  ds.name = std::move(name);
  ds.image_shape = std::move(image_shape);
  ds.class_index.assign(n_classes, {});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes) {
      throw ContractError("sample " + std::to_string(i) + " has class " +
                          std::to_string(labels[i]) + " >= " + std::to_string(n_classes));
    }
    if (images[i].shape() != ds.image_shape) {
      throw DimensionError("sample " + std::to_string(i) + " has shape " +
                           shape_str(images[i].shape()) + ", expected " +
                           shape_str(ds.image_shape));
    }
    ds.class_index[labels[i]].push_back(i);
  }
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (ds.class_index[c].empty()) {
      throw ContractError("class " + std::to_string(c) + " has no samples");
    }
  }
  ds.images = std::move(images);
  ds.labels = std::move(labels);
  ds.global_class.resize(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) ds.global_class[c] = static_cast<std::uint32_t>(c);
  ds.source_index.resize(ds.images.size());
  for (std::size_t i = 0; i < ds.source_index.size(); ++i) ds.source_index[i] = i;
  return ds;
}

// ---------------------------------------------------------------- FSDS

std::vector<std::uint8_t> encode_fsds(const Dataset& ds) {
  binio::Writer w;
  w.bytes("FSDS", 4);
  w.u16(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.n_classes()));
  w.u32(static_cast<std::uint32_t>(ds.size()));
  for (std::size_t e : ds.image_shape) w.u32(static_cast<std::uint32_t>(e));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    w.u32(ds.labels[i]);
    for (float v : ds.images[i].data()) w.f32(v);
  }
  return w.take();
}

Dataset decode_fsds(std::span<const std::uint8_t> bytes, const std::string& source) {
  binio::Reader r(bytes);
  if (r.str(4, "magic") != "FSDS") throw FormatError("bad dataset magic", 0);
  const std::size_t version_at = r.offset();
  const std::uint16_t version = r.u16("version");
  if (version != kDatasetVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(version), version_at);
  }
  const std::uint32_t n_classes = r.u32("n_classes");
  const std::uint32_t n_samples = r.u32("n_samples");
  const std::size_t shape_at = r.offset();
  Shape shape{r.u32("channels"), r.u32("height"), r.u32("width")};
  if (shape[0] == 0 || shape[1] == 0 || shape[2] == 0) {
    throw FormatError("image extents must be positive", shape_at);
  }
  if (n_classes == 0) throw FormatError("dataset declares zero classes", version_at + 2);
  const std::size_t per = shape_numel(shape);
  // reject impossible sizes before allocating
  r.need(static_cast<std::size_t>(n_samples) * (4 + per * 4), "samples");

  std::vector<Tensor<float>> images;
  std::vector<std::uint32_t> labels;
  images.reserve(n_samples);
  labels.reserve(n_samples);
  for (std::uint32_t i = 0; i < n_samples; ++i) {
    const std::size_t at = r.offset();
    const std::uint32_t cls = r.u32("class id");
    if (cls >= n_classes) {
      throw FormatError("class id " + std::to_string(cls) + " >= n_classes " +
                        std::to_string(n_classes), at);
    }
    std::vector<float> data(per);
    for (float& v : data) {
      const std::size_t vat = r.offset();
      v = r.f32("pixel");
      if (!(v >= 0.0f && v <= 1.0f)) throw FormatError("pixel value outside [0, 1]", vat);
    }
    labels.push_back(cls);
    images.emplace_back(shape, std::move(data));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after dataset", r.offset());
  std::vector<std::size_t> counts(n_classes, 0);
  for (std::uint32_t l : labels) ++counts[l];
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (counts[c] == 0) {
      throw FormatError("class " + std::to_string(c) + " declared but has no samples", r.offset());
    }
  }
  Dataset ds = make_dataset(source, shape, std::move(images), std::move(labels), n_classes);
  ds.source = source;
  return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) {
  binio::write_file_atomic(path, encode_fsds(ds));
}

Dataset load_dataset(const std::string& path) {
  return decode_fsds(binio::read_file(path), path);
}

// ---------------------------------------------------------------- splits

SplitSpec SplitSpec::contiguous(std::size_t base, std::size_t val, std::size_t novel) {
  SplitSpec s;
  std::uint32_t next = 0;
  for (std::size_t i = 0; i < base; ++i) s.base_classes.push_back(next++);
  for (std::size_t i = 0; i < val; ++i) s.val_classes.push_back(next++);
  for (std::size_t i = 0; i < novel; ++i) s.novel_classes.push_back(next++);
  return s;
}

Dataset class_view(const Dataset& ds, std::span<const std::uint32_t> classes,
                   const std::string& name) {
  std::vector<Tensor<float>> images;
  std::vector<std::uint32_t> labels;
  std::vector<std::size_t> source;
  for (std::size_t local = 0; local < classes.size(); ++local) {
    const std::uint32_t cls = classes[local];
    if (cls >= ds.n_classes()) {
      throw ConfigError("class " + std::to_string(cls) + " not in dataset with " +
                        std::to_string(ds.n_classes()) + " classes");
    }
    for (std::size_t idx : ds.class_index[cls]) {
      images.push_back(ds.images[idx]);
      labels.push_back(static_cast<std::uint32_t>(local));
      source.push_back(ds.source_index[idx]);
    }
  }
  if (classes.empty()) throw ConfigError("view '" + name + "' selects no classes");
  Dataset view = make_dataset(name, ds.image_shape, std::move(images), std::move(labels),
                              classes.size());
  view.source = ds.source;
  for (std::size_t local = 0; local < classes.size(); ++local) {
    view.global_class[local] = ds.global_class[classes[local]];
  }
  view.source_index = std::move(source);
  return view;
}

SplitViews split_classes(const Dataset& ds, const SplitSpec& spec) {
  std::set<std::uint32_t> seen;
  for (const auto* set : {&spec.base_classes, &spec.val_classes, &spec.novel_classes}) {
    for (std::uint32_t c : *set) {
      if (c >= ds.n_classes()) {
        throw ConfigError("split references class " + std::to_string(c) + " but the dataset has " +
                          std::to_string(ds.n_classes()));
      }
      if (!seen.insert(c).second) {
        throw ConfigError("class " + std::to_string(c) + " appears in more than one split");
      }
    }
  }
  SplitViews v;
  v.base = class_view(ds, spec.base_classes, ds.name + "/base");
  if (!spec.val_classes.empty()) v.val = class_view(ds, spec.val_classes, ds.name + "/val");
  v.novel = class_view(ds, spec.novel_classes, ds.name + "/novel");
  return v;
}

// ---------------------------------------------------------------- episodes

void EpisodeSpec::validate() const {
  if (ways < 2) throw ConfigError("episodes need at least 2 ways");
  if (shots < 1) throw ConfigError("episodes need at least 1 shot");
  if (queries < 1) throw ConfigError("episodes need at least 1 query per class");
}

Episode sample_episode(const Dataset& view, const EpisodeSpec& spec, Rng& rng) {
  spec.validate();
  if (view.n_classes() < spec.ways) {
    throw SamplingError("need " + std::to_string(spec.ways) + " classes, view '" + view.name +
                        "' has " + std::to_string(view.n_classes()));
  }
  const std::size_t per_class = spec.shots + spec.queries;
  for (std::size_t c = 0; c < view.n_classes(); ++c) {
    if (view.class_index[c].size() < per_class) {
      throw SamplingError("class " + std::to_string(c) + " of view '" + view.name + "' has " +
                          std::to_string(view.class_index[c].size()) + " samples, need " +
                          std::to_string(per_class));
    }
  }
  Episode ep;
  const std::vector<std::size_t> classes = rng.choose(view.n_classes(), spec.ways);
  for (std::size_t local = 0; local < classes.size(); ++local) {
    const auto& pool = view.class_index[classes[local]];
    const std::vector<std::size_t> pick = rng.choose(pool.size(), per_class);
    for (std::size_t k = 0; k < per_class; ++k) {
      if (k < spec.shots) {
        ep.support.push_back(pool[pick[k]]);
        ep.support_labels.push_back(static_cast<int>(local));
      } else {
        ep.query.push_back(pool[pick[k]]);
        ep.query_labels.push_back(static_cast<int>(local));
      }
    }
    ep.class_map.push_back(static_cast<std::uint32_t>(classes[local]));
  }
  return ep;
}

template <class Real>
LabeledBatch<Real> gather_batch(const Dataset& ds, std::span<const std::size_t> indices,
                                std::span<const int> labels) {
  if (indices.size() != labels.size()) {
    throw ContractError("gather_batch: index and label counts differ");
  }
  if (indices.empty()) throw ContractError("gather_batch: empty batch");
  const std::size_t per = shape_numel(ds.image_shape);
  Shape shape{indices.size()};
  shape.insert(shape.end(), ds.image_shape.begin(), ds.image_shape.end());
  LabeledBatch<Real> batch{Tensor<Real>(shape), std::vector<int>(labels.begin(), labels.end())};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = ds.images.at(indices[i]).data();
    std::copy(src.begin(), src.end(), batch.images.data().begin() + i * per);
  }
  return batch;
}

template <class Real>
LabeledBatch<Real> gather_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (std::size_t i : indices) labels.push_back(static_cast<int>(ds.labels.at(i)));
  return gather_batch<Real>(ds, indices, labels);
}

template LabeledBatch<float> gather_batch<float>(const Dataset&, std::span<const std::size_t>,
                                                 std::span<const int>);
template LabeledBatch<double> gather_batch<double>(const Dataset&, std::span<const std::size_t>,
                                                   std::span<const int>);
template LabeledBatch<float> gather_batch<float>(const Dataset&, std::span<const std::size_t>);
template LabeledBatch<double> gather_batch<double>(const Dataset&, std::span<const std::size_t>);

// ---------------------------------------------------------------- synthetic

void SyntheticSpec::validate() const {
  if (n_classes == 0 || samples_per_class == 0 || channels == 0 || image_extent == 0) {
    throw ConfigError("synthetic spec needs positive class, sample, channel and extent counts");
  }
  if (!(class_separation > 0.0)) throw ConfigError("class_separation must be positive");
  if (!(cluster_std >= 0.0)) throw ConfigError("cluster_std must be non-negative");
  if (template_grid < 2) throw ConfigError("template_grid must be at least 2");
}

namespace {

Tensor<float> smooth_template(const SyntheticSpec& spec, Rng& rng) {
  const std::size_t g = spec.template_grid, n = spec.image_extent;
  Tensor<float> img(Shape{spec.channels, n, n});
  std::vector<double> grid(g * g);
  for (std::size_t c = 0; c < spec.channels; ++c) {
    for (double& v : grid) v = rng.uniform();
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        // bilinear interpolation of the grid over the image
        const double gy = (static_cast<double>(y) + 0.5) * static_cast<double>(g - 1) / n;
        const double gx = (static_cast<double>(x) + 0.5) * static_cast<double>(g - 1) / n;
        const auto y0 = static_cast<std::size_t>(gy), x0 = static_cast<std::size_t>(gx);
        const std::size_t y1 = std::min(y0 + 1, g - 1), x1 = std::min(x0 + 1, g - 1);
        const double fy = gy - static_cast<double>(y0), fx = gx - static_cast<double>(x0);
        const double v = (1 - fy) * ((1 - fx) * grid[y0 * g + x0] + fx * grid[y0 * g + x1]) +
                         fy * ((1 - fx) * grid[y1 * g + x0] + fx * grid[y1 * g + x1]);
        img[(c * n + y) * n + x] = static_cast<float>(v);
      }
  }
  return img;
}

double distance(const Tensor<float>& a, const Tensor<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace

std::vector<Tensor<float>> synthetic_templates(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, "synthetic/templates"));
  std::vector<Tensor<float>> templates;
  constexpr int kMaxTries = 1000;
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    for (int attempt = 0;; ++attempt) {
      if (attempt == kMaxTries) {
        throw ConfigError("cannot place " + std::to_string(spec.n_classes) +
                          " templates at separation " + std::to_string(spec.class_separation));
      }
      Tensor<float> t = smooth_template(spec, rng);
      bool ok = true;
      for (const auto& other : templates) {
        if (distance(t, other) < spec.class_separation) {
          ok = false;
          break;
        }
      }
      if (ok) {
        templates.push_back(std::move(t));
        break;
      }
    }
  }
  return templates;
}

Dataset gen_synthetic(const SyntheticSpec& spec) {
  const std::vector<Tensor<float>> templates = synthetic_templates(spec);
  Rng rng(derive_seed(spec.seed, "synthetic/samples"));
  std::vector<Tensor<float>> images;
  std::vector<std::uint32_t> labels;
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    for (std::size_t k = 0; k < spec.samples_per_class; ++k) {
      Tensor<float> img = templates[c];
      if (spec.cluster_std > 0.0) {
        for (float& v : img.data()) {
          const double x = static_cast<double>(v) + spec.cluster_std * rng.normal();
          v = static_cast<float>(std::clamp(x, 0.0, 1.0));
        }
      }
      images.push_back(std::move(img));
      labels.push_back(static_cast<std::uint32_t>(c));
    }
  }
  Shape shape{spec.channels, spec.image_extent, spec.image_extent};
  return make_dataset("synthetic", shape, std::move(images), std::move(labels), spec.n_classes);
}

}  // namespace fsml
