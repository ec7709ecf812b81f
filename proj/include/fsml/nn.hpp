#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fsml/autograd.hpp"
#include "fsml/rng.hpp"
#include "fsml/tensor.hpp"

namespace fsml {

enum class LayerTag { Conv1, Conv2, Conv3, Conv4, Flatten, Head };

std::string_view tag_name(LayerTag tag) noexcept;
/// Throws ConfigError for unknown names.
LayerTag parse_tag(std::string_view name);
std::set<LayerTag> parse_tags(const std::vector<std::string>& names);

enum class HeadKind { Linear, Cosine };
enum class Mode { Train, Eval };
/// Stage of the procedure a forward pass belongs to.
enum class Stage { MetaTraining, MetaTesting };
/// Stages in which a dropout spec is allowed to fire.
enum class SpecStage { MetaTraining, MetaTesting, Both };
enum class DropoutKind { Standard, Spatial, DropBlock };

std::string_view kind_name(DropoutKind kind) noexcept;
DropoutKind parse_kind(std::string_view name);
std::string_view spec_stage_name(SpecStage stage) noexcept;
SpecStage parse_spec_stage(std::string_view name);

struct DropoutSpec {
  DropoutKind kind = DropoutKind::Standard;
  double keep_prob = 1.0;
  std::size_t block_size = 1;  // dropblock only
  std::set<LayerTag> placements;
  SpecStage stage = SpecStage::MetaTraining;

  bool fires_in(Stage s) const noexcept {
    return stage == SpecStage::Both ||
           (stage == SpecStage::MetaTraining) == (s == Stage::MetaTraining);
  }
  /// Checks keep_prob and block_size ranges; throws ConfigError.
  void validate() const;
};

/// Seed rate of dropblock on a square feat x feat map:
/// ((1 - keep_prob) / b^2) * feat^2 / (feat - b + 1)^2.
double dropblock_gamma(double keep_prob, std::size_t block_size, std::size_t feat);
/// Rectangular form used for [C,H,W] masks.
double dropblock_gamma(double keep_prob, std::size_t block_size, std::size_t h, std::size_t w);

/// Multiplier applied to surviving units of standard and spatial dropout.
inline double inverted_dropout_scale(double keep_prob) noexcept { return 1.0 / keep_prob; }

/// One mask of values in {0, scale} for an activation of `shape` (a single
/// sample). Standard: i.i.d. Bernoulli(keep_prob) per element, scale
/// 1/keep_prob. Spatial: one draw per channel of a [C,H,W] shape. Dropblock:
/// Bernoulli(gamma) block centres per channel, each zeroing a b x b square, and
/// survivors rescaled by total/kept of this draw. keep_prob == 1 returns ones
/// without consuming randomness.
template <class Real>
Tensor<Real> make_dropout_mask(const DropoutSpec& spec, const Shape& shape, Rng& rng);

struct NetworkSpec {
  std::array<std::size_t, 4> widths{8, 8, 8, 8};
  Shape input_shape{1, 32, 32};  // [c, h, w]
  std::size_t n_classes = 5;
  HeadKind head = HeadKind::Cosine;
  double cosine_scale = 10.0;

  bool operator==(const NetworkSpec&) const = default;
};

template <class Real>
using ParamStore = std::map<std::string, Tensor<Real>>;
using ParamVars = std::map<std::string, Var>;

/// Split of the parameter registry into meta-knowledge (w) and
/// task-knowledge (theta).
struct ParamPartition {
  std::set<std::string> meta_ids;
  std::set<std::string> task_ids;
  std::set<LayerTag> meta_tags;

  bool is_meta(const std::string& id) const { return meta_ids.count(id) != 0; }
  /// Layer tags whose activations are produced entirely by w. Flatten counts
  /// when conv4 is meta-knowledge.
  std::set<LayerTag> meta_activation_tags() const;
};

struct ForwardContext {
  Mode mode = Mode::Eval;
  Stage stage = Stage::MetaTesting;
  std::span<const DropoutSpec> specs;
  Rng* rng = nullptr;  // required when any spec can fire
};

/// Conv-4 backbone (four conv3x3 -> relu -> maxpool2 blocks), flatten, and a
/// linear or cosine head. Parameters live in an id-keyed registry.
template <class Real>
class Network {
 public:
  Network() = default;
  Network(NetworkSpec spec, ParamStore<Real> params);

  /// Throws ConfigError when the input extents are not divisible by 16.
  static Network build_conv4(const NetworkSpec& spec, std::uint64_t seed);

  const NetworkSpec& spec() const noexcept { return spec_; }
  ParamStore<Real>& params() noexcept { return params_; }
  const ParamStore<Real>& params() const noexcept { return params_; }

  static constexpr std::array<LayerTag, 6> kTags{LayerTag::Conv1, LayerTag::Conv2,
                                                 LayerTag::Conv3, LayerTag::Conv4,
                                                 LayerTag::Flatten, LayerTag::Head};
  std::vector<std::string> layer_param_ids(LayerTag tag) const;
  LayerTag layer_of(const std::string& param_id) const;
  /// Per-sample shape of the activation that masks at `tag` multiply.
  Shape activation_shape(LayerTag tag) const;
  std::size_t feature_width() const;
  std::size_t param_count() const;

  /// Fresh head parameters for `n_classes` drawn from the init distribution.
  ParamStore<Real> init_head(std::size_t n_classes, std::uint64_t seed) const;
  /// Replaces the head by a freshly initialized one of `n_classes` outputs.
  void reset_head(std::size_t n_classes, std::uint64_t seed);

  /// Registers every parameter on the tape: ids in `trainable` as gradient
  /// sinks, the rest as constants.
  ParamVars bind(Tape<Real>& tape, const std::set<std::string>& trainable) const;
  ParamVars bind_all(Tape<Real>& tape) const;

  /// Logits [B, n_classes] for a [B,c,h,w] batch.
  Var forward(Tape<Real>& tape, const ParamVars& vars, const Tensor<Real>& batch,
              const ForwardContext& ctx) const;
  /// Backbone output after flatten (including masks placed on flatten).
  Var features(Tape<Real>& tape, const ParamVars& vars, Var input,
               const ForwardContext& ctx) const;
  Var head_logits(Tape<Real>& tape, const ParamVars& vars, Var features) const;
  /// Applies every spec firing at `tag` to the batch activation `x`.
  Var apply_masks(Tape<Real>& tape, Var x, LayerTag tag, const ForwardContext& ctx) const;

  /// Placement and shape checks of a spec against this architecture.
  void validate_dropout(const DropoutSpec& spec) const;

  template <class To>
  Network<To> cast() const {
    ParamStore<To> p;
    for (const auto& [id, t] : params_) p.emplace(id, t.template cast<To>());
    return Network<To>(spec_, std::move(p));
  }

 private:
  NetworkSpec spec_;
  ParamStore<Real> params_;
};

/// Parameters of layers in `meta_tags` become meta-knowledge, everything else
/// (always including the head) task-knowledge. Throws ConfigError when
/// `meta_tags` contains the head.
template <class Real>
ParamPartition partition_params(const Network<Real>& net, const std::set<LayerTag>& meta_tags);

// ---------------------------------------------------------------- checkpoints

/// FSML checkpoint: "FSML", u16 version, u32 count, then per parameter a u32 id
/// length, id bytes, u8 rank, u32 extents, little-endian float32 data.
std::vector<std::uint8_t> encode_checkpoint(const ParamStore<float>& params);
ParamStore<float> decode_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const std::string& path, const ParamStore<float>& params);
ParamStore<float> read_checkpoint(const std::string& path);

/// Copies checkpoint values into `net`; throws LoadError naming the first
/// missing, extra, or mis-shaped parameter.
void load_params(Network<float>& net, const ParamStore<float>& loaded);

inline constexpr std::uint16_t kCheckpointVersion = 1;

}  // namespace fsml
