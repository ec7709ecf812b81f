#include "fsml/nn.hpp"

#include <algorithm>
#include <cmath>

#include "binio.hpp"

namespace fsml {

std::string_view tag_name(LayerTag tag) noexcept {
  switch (tag) {
    case LayerTag::Conv1: return "conv1";
    case LayerTag::Conv2: return "conv2";
    case LayerTag::Conv3: return "conv3";
    case LayerTag::Conv4: return "conv4";
    case LayerTag::Flatten: return "flatten";
    case LayerTag::Head: return "head";
  }
  return "?";
}

LayerTag parse_tag(std::string_view name) {
  for (LayerTag t : Network<float>::kTags) {
    if (tag_name(t) == name) return t;
  }
  throw ConfigError("unknown layer tag '" + std::string(name) + "'");
}

std::set<LayerTag> parse_tags(const std::vector<std::string>& names) {
  std::set<LayerTag> out;
  for (const auto& n : names) out.insert(parse_tag(n));
  return out;
}

std::string_view kind_name(DropoutKind kind) noexcept {
  switch (kind) {
    case DropoutKind::Standard: return "standard";
    case DropoutKind::Spatial: return "spatial";
    case DropoutKind::DropBlock: return "dropblock";
  }
  return "?";
}

DropoutKind parse_kind(std::string_view name) {
  for (DropoutKind k : {DropoutKind::Standard, DropoutKind::Spatial, DropoutKind::DropBlock}) {
    if (kind_name(k) == name) return k;
  }
  throw ConfigError("unknown dropout kind '" + std::string(name) + "'");
}

std::string_view spec_stage_name(SpecStage stage) noexcept {
  switch (stage) {
    case SpecStage::MetaTraining: return "meta_training";
    case SpecStage::MetaTesting: return "meta_testing";
    case SpecStage::Both: return "both";
  }
  return "?";
}

SpecStage parse_spec_stage(std::string_view name) {
  for (SpecStage s : {SpecStage::MetaTraining, SpecStage::MetaTesting, SpecStage::Both}) {
    if (spec_stage_name(s) == name) return s;
  }
  throw ConfigError("unknown dropout stage '" + std::string(name) + "'");
}

void DropoutSpec::validate() const {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) {
    throw ConfigError("dropout keep_prob must lie in (0, 1], got " + std::to_string(keep_prob));
  }
  if (kind == DropoutKind::DropBlock && (block_size == 0 || block_size % 2 == 0)) {
    throw ConfigError("dropblock block_size must be an odd positive integer, got " +
                      std::to_string(block_size));
  }
  if (placements.empty()) throw ConfigError("dropout spec has no placements");
}

// ---------------------------------------------------------------- masks

double dropblock_gamma(double keep_prob, std::size_t block_size, std::size_t h, std::size_t w) {
  if (block_size == 0 || block_size > h || block_size > w) {
    throw ConfigError("dropblock block_size " + std::to_string(block_size) +
                      " exceeds feature extent " + std::to_string(std::min(h, w)));
  }
  // integer ratio first, so a block covering the whole map gives exactly 1 - keep_prob
  const std::size_t valid = (h - block_size + 1) * (w - block_size + 1);
  const double geometry = static_cast<double>(h * w) / static_cast<double>(block_size * block_size * valid);
  return (1.0 - keep_prob) * geometry;
}

double dropblock_gamma(double keep_prob, std::size_t block_size, std::size_t feat) {
  return dropblock_gamma(keep_prob, block_size, feat, feat);
}

namespace {

// Zero pattern of one dropblock draw over [C,H,W]; returns the kept count.
std::size_t draw_dropblock(std::vector<std::uint8_t>& keep, std::size_t C, std::size_t H,
                           std::size_t W, std::size_t b, double gamma, Rng& rng) {
  std::fill(keep.begin(), keep.end(), std::uint8_t{1});
  const std::size_t half = b / 2;
  for (std::size_t c = 0; c < C; ++c) {
    std::uint8_t* plane = keep.data() + c * H * W;
    // centres range over the positions whose block lies inside the map
    for (std::size_t cy = half; cy + half < H; ++cy)
      for (std::size_t cx = half; cx + half < W; ++cx) {
        if (!rng.bernoulli(gamma)) continue;
        for (std::size_t y = cy - half; y <= cy + half; ++y)
          std::fill(plane + y * W + (cx - half), plane + y * W + (cx + half) + 1, std::uint8_t{0});
      }
  }
  return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{1}));
}

}  // namespace

template <class Real>
Tensor<Real> make_dropout_mask(const DropoutSpec& spec, const Shape& shape, Rng& rng) {
  Tensor<Real> mask(shape, Real(1));
  const bool chw = shape.size() == 3;
  if ((spec.kind == DropoutKind::Spatial || spec.kind == DropoutKind::DropBlock) && !chw) {
    throw ConfigError(std::string(kind_name(spec.kind)) + " dropout needs a [C,H,W] activation, got " +
                      shape_str(shape));
  }
  if (spec.keep_prob >= 1.0) return mask;

  switch (spec.kind) {
    case DropoutKind::Standard: {
      const Real s = static_cast<Real>(inverted_dropout_scale(spec.keep_prob));
      for (Real& v : mask.data()) v = rng.bernoulli(spec.keep_prob) ? s : Real(0);
      break;
    }
    case DropoutKind::Spatial: {
      const Real s = static_cast<Real>(inverted_dropout_scale(spec.keep_prob));
      const std::size_t plane = shape[1] * shape[2];
      for (std::size_t c = 0; c < shape[0]; ++c) {
        const Real v = rng.bernoulli(spec.keep_prob) ? s : Real(0);
        std::fill(mask.data().begin() + c * plane, mask.data().begin() + (c + 1) * plane, v);
      }
      break;
    }
    case DropoutKind::DropBlock: {
      const std::size_t C = shape[0], H = shape[1], W = shape[2];
      const double gamma = dropblock_gamma(spec.keep_prob, spec.block_size, H, W);
      std::vector<std::uint8_t> keep(C * H * W);
      std::size_t kept = draw_dropblock(keep, C, H, W, spec.block_size, gamma, rng);
      if (kept == 0) kept = draw_dropblock(keep, C, H, W, spec.block_size, gamma, rng);
      if (kept == 0) return mask;  // degenerate: fall back to all-ones
      const Real s = static_cast<Real>(static_cast<double>(keep.size()) / static_cast<double>(kept));
      for (std::size_t i = 0; i < keep.size(); ++i) mask[i] = keep[i] ? s : Real(0);
      break;
    }
  }
  return mask;
}

template Tensor<float> make_dropout_mask<float>(const DropoutSpec&, const Shape&, Rng&);
template Tensor<double> make_dropout_mask<double>(const DropoutSpec&, const Shape&, Rng&);

// ---------------------------------------------------------------- partition

std::set<LayerTag> ParamPartition::meta_activation_tags() const {
  std::set<LayerTag> out;
  for (LayerTag t : meta_tags) {
    if (t != LayerTag::Head && t != LayerTag::Flatten) out.insert(t);
  }
  if (out.count(LayerTag::Conv4)) out.insert(LayerTag::Flatten);
  return out;
}

template <class Real>
ParamPartition partition_params(const Network<Real>& net, const std::set<LayerTag>& meta_tags) {
  if (meta_tags.count(LayerTag::Head)) {
    throw ConfigError("the head is task-knowledge and cannot be tagged as meta-knowledge");
  }
  ParamPartition part;
  part.meta_tags = meta_tags;
  for (const auto& [id, _] : net.params()) {
    if (meta_tags.count(net.layer_of(id))) {
      part.meta_ids.insert(id);
    } else {
      part.task_ids.insert(id);
    }
  }
  return part;
}

template ParamPartition partition_params<float>(const Network<float>&, const std::set<LayerTag>&);
template ParamPartition partition_params<double>(const Network<double>&, const std::set<LayerTag>&);

// ---------------------------------------------------------------- network

namespace {

constexpr std::array<LayerTag, 4> kConvTags{LayerTag::Conv1, LayerTag::Conv2, LayerTag::Conv3,
                                            LayerTag::Conv4};

template <class Real>
Tensor<Real> kaiming_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
  Tensor<Real> t(shape);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (Real& v : t.data()) v = static_cast<Real>(rng.uniform(-bound, bound));
  return t;
}

template <class Real>
Tensor<Real> unit_rows(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor<Real> t(Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    double norm = 0.0;
    std::vector<double> row(cols);
    for (double& v : row) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < cols; ++c) t[r * cols + c] = static_cast<Real>(row[c] / norm);
  }
  return t;
}

}  // namespace

template <class Real>
Network<Real>::Network(NetworkSpec spec, ParamStore<Real> params)
    : spec_(std::move(spec)), params_(std::move(params)) {}

template <class Real>
Network<Real> Network<Real>::build_conv4(const NetworkSpec& spec, std::uint64_t seed) {
  if (spec.input_shape.size() != 3) {
    throw ConfigError("network input shape must be [c,h,w], got " + shape_str(spec.input_shape));
  }
  if (spec.input_shape[1] % 16 != 0 || spec.input_shape[2] % 16 != 0 ||
      spec.input_shape[1] == 0 || spec.input_shape[2] == 0) {
    throw ConfigError("Conv-4 needs input extents divisible by 16, got " +
                      shape_str(spec.input_shape));
  }
  for (std::size_t w : spec.widths) {
    if (w == 0) throw ConfigError("Conv-4 channel widths must be positive");
  }
  if (spec.n_classes == 0) throw ConfigError("network needs at least one class");
  if (spec.head == HeadKind::Cosine && !(spec.cosine_scale > 0.0)) {
    throw ConfigError("cosine_scale must be positive");
  }
  Network net(spec, {});
  Rng root(seed);
  std::size_t c_in = spec.input_shape[0];
  for (std::size_t k = 0; k < 4; ++k) {
    const std::string name(tag_name(kConvTags[k]));
    Rng rng = root.derive("init/" + name);
    const std::size_t c_out = spec.widths[k];
    net.params_.emplace(name + ".weight",
                        kaiming_uniform<Real>(Shape{c_out, c_in, 3, 3}, c_in * 9, rng));
    net.params_.emplace(name + ".bias", Tensor<Real>(Shape{c_out}));
    c_in = c_out;
  }
  for (auto& [id, t] : net.init_head(spec.n_classes, root.derive("init/head").next_u64())) {
    net.params_.insert_or_assign(id, std::move(t));
  }
  return net;
}

template <class Real>
ParamStore<Real> Network<Real>::init_head(std::size_t n_classes, std::uint64_t seed) const {
  if (n_classes == 0) throw ConfigError("head needs at least one class");
  Rng rng(seed);
  const std::size_t d = feature_width();
  ParamStore<Real> head;
  if (spec_.head == HeadKind::Linear) {
    head.emplace("head.weight", kaiming_uniform<Real>(Shape{n_classes, d}, d, rng));
    head.emplace("head.bias", Tensor<Real>(Shape{n_classes}));
  } else {
    head.emplace("head.weight", unit_rows<Real>(n_classes, d, rng));
  }
  return head;
}

template <class Real>
void Network<Real>::reset_head(std::size_t n_classes, std::uint64_t seed) {
  ParamStore<Real> head = init_head(n_classes, seed);
  params_.erase("head.weight");
  params_.erase("head.bias");
  for (auto& [id, t] : head) params_.emplace(id, std::move(t));
  spec_.n_classes = n_classes;
}

template <class Real>
std::vector<std::string> Network<Real>::layer_param_ids(LayerTag tag) const {
  std::vector<std::string> ids;
  const std::string prefix = std::string(tag_name(tag)) + ".";
  for (const auto& [id, _] : params_) {
    if (id.rfind(prefix, 0) == 0) ids.push_back(id);
  }
  return ids;
}

template <class Real>
LayerTag Network<Real>::layer_of(const std::string& param_id) const {
  const auto dot = param_id.find('.');
  return parse_tag(std::string_view(param_id).substr(0, dot));
}

template <class Real>
Shape Network<Real>::activation_shape(LayerTag tag) const {
  const std::size_t h = spec_.input_shape[1], w = spec_.input_shape[2];
  switch (tag) {
    case LayerTag::Conv1:
    case LayerTag::Conv2:
    case LayerTag::Conv3:
    case LayerTag::Conv4: {
      const auto k = static_cast<std::size_t>(tag) - static_cast<std::size_t>(LayerTag::Conv1);
      return Shape{spec_.widths[k], h >> k, w >> k};
    }
    case LayerTag::Flatten: return Shape{feature_width()};
    case LayerTag::Head: return Shape{spec_.n_classes};
  }
  return {};
}

template <class Real>
std::size_t Network<Real>::feature_width() const {
  return spec_.widths[3] * (spec_.input_shape[1] / 16) * (spec_.input_shape[2] / 16);
}

template <class Real>
std::size_t Network<Real>::param_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

template <class Real>
ParamVars Network<Real>::bind(Tape<Real>& tape, const std::set<std::string>& trainable) const {
  ParamVars vars;
  for (const auto& [id, t] : params_) {
    vars.emplace(id, trainable.count(id) ? tape.parameter(id, t) : tape.constant(t));
  }
  return vars;
}

template <class Real>
ParamVars Network<Real>::bind_all(Tape<Real>& tape) const {
  ParamVars vars;
  for (const auto& [id, t] : params_) vars.emplace(id, tape.parameter(id, t));
  return vars;
}

template <class Real>
void Network<Real>::validate_dropout(const DropoutSpec& spec) const {
  spec.validate();
  for (LayerTag tag : spec.placements) {
    if (tag == LayerTag::Head) {
      throw ConfigError("dropout cannot be placed on the head output");
    }
    const Shape s = activation_shape(tag);
    if (spec.kind != DropoutKind::Standard && s.size() != 3) {
      throw ConfigError(std::string(kind_name(spec.kind)) + " dropout cannot be placed on '" +
                        std::string(tag_name(tag)) + "' (activation " + shape_str(s) + ")");
    }
    if (spec.kind == DropoutKind::DropBlock && (spec.block_size > s[1] || spec.block_size > s[2])) {
      throw ConfigError("dropblock block_size " + std::to_string(spec.block_size) +
                        " exceeds the " + std::to_string(s[1]) + "x" + std::to_string(s[2]) +
                        " feature map at '" + std::string(tag_name(tag)) + "'");
    }
  }
}

template <class Real>
Var Network<Real>::apply_masks(Tape<Real>& tape, Var x, LayerTag tag,
                               const ForwardContext& ctx) const {
  if (ctx.mode != Mode::Train) return x;
  for (const DropoutSpec& spec : ctx.specs) {
    if (!spec.fires_in(ctx.stage) || !spec.placements.count(tag) || spec.keep_prob >= 1.0) continue;
    if (!ctx.rng) throw ContractError("training forward with dropout needs an rng");
    const Shape& full = tape.value(x).shape();
    const Shape sample(full.begin() + 1, full.end());
    const std::size_t per = shape_numel(sample);
    Tensor<Real> mask(full);
    for (std::size_t b = 0; b < full[0]; ++b) {
      Tensor<Real> m = make_dropout_mask<Real>(spec, sample, *ctx.rng);
      std::copy(m.data().begin(), m.data().end(), mask.data().begin() + b * per);
    }
    x = mul_mask(tape, x, mask);
  }
  return x;
}

template <class Real>
Var Network<Real>::features(Tape<Real>& tape, const ParamVars& vars, Var input,
                            const ForwardContext& ctx) const {
  Var x = input;
  for (LayerTag tag : kConvTags) {
    const std::string name(tag_name(tag));
    x = conv2d(tape, x, vars.at(name + ".weight"), vars.at(name + ".bias"), 1, 1);
    x = relu(tape, x);
    x = apply_masks(tape, x, tag, ctx);
    x = maxpool2(tape, x);
  }
  const std::size_t batch = tape.value(x).dim(0);
  x = reshape(tape, x, Shape{batch, feature_width()});
  return apply_masks(tape, x, LayerTag::Flatten, ctx);
}

template <class Real>
Var Network<Real>::head_logits(Tape<Real>& tape, const ParamVars& vars, Var feats) const {
  if (spec_.head == HeadKind::Linear) {
    Var wt = transpose(tape, vars.at("head.weight"));
    return add_row_bias(tape, matmul(tape, feats, wt), vars.at("head.bias"));
  }
  return cosine_logits(tape, feats, vars.at("head.weight"), static_cast<Real>(spec_.cosine_scale));
}

template <class Real>
Var Network<Real>::forward(Tape<Real>& tape, const ParamVars& vars, const Tensor<Real>& batch,
                           const ForwardContext& ctx) const {
  if (batch.rank() != 4 || Shape(batch.shape().begin() + 1, batch.shape().end()) != spec_.input_shape) {
    throw DimensionError("forward: batch " + shape_str(batch.shape()) +
                         " does not match network input " + shape_str(spec_.input_shape));
  }
  for (const DropoutSpec& spec : ctx.specs) validate_dropout(spec);
  Var x = tape.constant(batch);
  Var logits = head_logits(tape, vars, features(tape, vars, x, ctx));
  if (tape.value(logits).dim(1) != spec_.n_classes) {
    throw ContractError("head width does not match class count");
  }
  return logits;
}

template class Network<float>;
template class Network<double>;

// ---------------------------------------------------------------- checkpoints

std::vector<std::uint8_t> encode_checkpoint(const ParamStore<float>& params) {
  binio::Writer w;
  w.bytes("FSML", 4);
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& [id, t] : params) {
    w.u32(static_cast<std::uint32_t>(id.size()));
    w.bytes(id.data(), id.size());
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (float v : t.data()) w.f32(v);
  }
  return w.take();
}

ParamStore<float> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes);
  if (r.str(4, "magic") != "FSML") throw FormatError("bad checkpoint magic", 0);
  const std::size_t version_at = r.offset();
  const std::uint16_t version = r.u16("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const std::uint32_t count = r.u32("parameter count");
  ParamStore<float> params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32("id length");
    const std::size_t id_at = r.offset();
    std::string id = r.str(len, "parameter id");
    const std::uint8_t rank = r.u8("rank");
    Shape shape;
    std::size_t numel = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      const std::size_t at = r.offset();
      const std::uint32_t e = r.u32("extent");
      if (e == 0) throw FormatError("zero extent for parameter '" + id + "'", at);
      shape.push_back(e);
      numel *= e;
    }
    r.need(numel * 4, "parameter data");
    std::vector<float> data(numel);
    for (float& v : data) v = r.f32("parameter data");
    if (!params.emplace(id, Tensor<float>(shape, std::move(data))).second) {
      throw FormatError("duplicate parameter id '" + id + "'", id_at);
    }
  }
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint", r.offset());
  return params;
}

void write_checkpoint(const std::string& path, const ParamStore<float>& params) {
  binio::write_file_atomic(path, encode_checkpoint(params));
}

ParamStore<float> read_checkpoint(const std::string& path) {
  return decode_checkpoint(binio::read_file(path));
}

void load_params(Network<float>& net, const ParamStore<float>& loaded) {
  for (const auto& [id, t] : net.params()) {
    auto it = loaded.find(id);
    if (it == loaded.end()) throw LoadError("checkpoint is missing parameter '" + id + "'");
    if (it->second.shape() != t.shape()) {
      throw LoadError("parameter '" + id + "' has shape " + shape_str(it->second.shape()) +
                      " in the checkpoint but " + shape_str(t.shape()) + " in the network");
    }
  }
  for (const auto& [id, _] : loaded) {
    if (!net.params().count(id)) throw LoadError("checkpoint has unknown parameter '" + id + "'");
  }
  for (auto& [id, t] : net.params()) t = loaded.at(id);
}

}  // namespace fsml
