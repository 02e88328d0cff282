#include "triadpi/nets.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "triadpi/errors.hpp"
#include "triadpi/hash.hpp"
#include "triadpi/losses.hpp"
#include "triadpi/phantom.hpp"

namespace triadpi::nets {

namespace fs = std::filesystem;
using nlohmann::json;

void NetSpec::validate() const {
  if (in_channels < 1) throw ConfigError("net needs at least one input channel");
  if (n_classes < 2) throw ConfigError("net needs at least two classes");
  if (base_filters < 1) throw ConfigError("base_filters must be >= 1");
  if (depth < 1) throw ConfigError("depth must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0, 1)");
  if (n_heads != 1 && n_heads != 3) throw ConfigError("n_heads must be 1 or 3");
  if (n_heads == 3 && head_kind != HeadKind::segmentation)
    throw ConfigError("three heads are only defined for segmentation nets");
  if (head_kind == HeadKind::regression && regression_outputs < 1)
    throw ConfigError("regression net needs regression_outputs >= 1");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(ce_weight >= 0)) throw ConfigError("ce_weight must be nonnegative");
  if (loss == LossKind::triad) losses::TriadLossConfig{gamma}.validate();
  if (loss == LossKind::pinball_compound && !(alpha > 0 && alpha < 1))
    throw ConfigError("pinball alpha must lie in (0, 1)");
}

template <typename T>
const Tensor<T>& SoftMaskSetT<T>::head(const std::string& name) const {
  for (std::size_t i = 0; i < head_names.size(); ++i)
    if (head_names[i] == name) return probs[i];
  throw ConfigError("no head named '" + name + "'");
}

// --- Adam ----------------------------------------------------------------------

template <typename T>
Adam<T>::Adam(std::size_t n, double lr, double beta1, double beta2, double eps)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), m_(n, T(0)), v_(n, T(0)) {}

template <typename T>
void Adam<T>::step(std::span<T> params, std::span<const T> grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, double(t_));
  const double c2 = 1.0 - std::pow(b2_, double(t_));
  const T step = T(lr_ * std::sqrt(c2) / c1);
  const T b1 = T(b1_), b2 = T(b2_), eps = T(eps_ * std::sqrt(c2));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    m_[i] = b1 * m_[i] + (T(1) - b1) * g;
    v_[i] = b2 * v_[i] + (T(1) - b2) * g * g;
    params[i] -= step * m_[i] / (std::sqrt(v_[i]) + eps);
  }
}

// --- input normalisation ----------------------------------------------------

template <typename T>
Tensor<T> InputNorm::apply(const Tensor<T>& x) const {
  if (empty()) return x;
  if (int(mean.size()) != x.channels())
    throw ShapeError("input normalisation has " + std::to_string(mean.size()) + " channels, input has " +
                     std::to_string(x.channels()));
  Tensor<T> out = x;
  for (int c = 0; c < x.channels(); ++c) {
    const T m = T(mean[c]), inv = T(1.0 / sd[c]);
    for (auto& v : out.channel(c)) v = (v - m) * inv;
  }
  return out;
}

InputNorm fit_input_norm(std::span<const Tensor<float>* const> images) {
  if (images.empty()) throw ConfigError("cannot fit input normalisation on an empty set");
  const int nc = images.front()->channels();
  InputNorm n;
  n.mean.assign(nc, 0.0);
  n.sd.assign(nc, 0.0);
  std::vector<double> sq(nc, 0.0);
  double count = 0;
  for (const auto* img : images) {
    if (img->channels() != nc) throw ShapeError("images differ in channel count");
    for (int c = 0; c < nc; ++c)
      for (auto v : img->channel(c)) {
        n.mean[c] += v;
        sq[c] += double(v) * v;
      }
    count += double(img->voxels());
  }
  for (int c = 0; c < nc; ++c) {
    n.mean[c] /= count;
    n.sd[c] = std::max(std::sqrt(std::max(sq[c] / count - n.mean[c] * n.mean[c], 0.0)), 1e-6);
  }
  return n;
}

template Tensor<float> InputNorm::apply<float>(const Tensor<float>&) const;
template Tensor<double> InputNorm::apply<double>(const Tensor<double>&) const;

// --- SegNet --------------------------------------------------------------------

namespace {

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  T* x = a.data();
  const T* y = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) x[i] += y[i];
}

class Allocator {
 public:
  layers::Conv3d conv(int in, int out, int kernel, int stride) {
    layers::Conv3d c{in, out, kernel, stride, offset_, 0};
    c.bias_offset = offset_ + c.weight_count();
    offset_ += c.param_count();
    return c;
  }
  layers::Linear linear(int in, int out) {
    layers::Linear l{in, out, offset_, offset_ + std::size_t(in) * out};
    offset_ += l.param_count();
    return l;
  }
  std::size_t size() const { return offset_; }

 private:
  std::size_t offset_ = 0;
};

void check_min_grid(const Grid3& g, int depth, const char* what) {
  const int need = 1 << depth;
  if (g.d < need || g.h < need || g.w < need)
    throw ShapeError(std::string(what) + ": grid " + g.str() + " smaller than 2^depth = " + std::to_string(need));
}

}  // namespace

template <typename T>
SegNet<T>::SegNet(const NetSpec& spec, std::uint64_t seed) : spec_(spec), seed_(seed) {
  spec_.validate();
  if (spec_.head_kind != HeadKind::segmentation) throw ConfigError("SegNet needs head_kind = segmentation");
  const bool drop = spec_.dropout_rate > 0;
  auto filters = [&](int level) { return spec_.base_filters << level; };
  Allocator alloc;
  for (int l = 0; l < spec_.depth; ++l) {
    const int in = l == 0 ? spec_.in_channels : filters(l - 1);
    enc_a_.push_back({alloc.conv(in, filters(l), 3, l == 0 ? 1 : 2), true, drop});
    enc_b_.push_back({alloc.conv(filters(l), filters(l), 3, 1), true, drop});
  }
  for (int l = spec_.depth - 2; l >= 0; --l) {
    dec_up_.push_back({alloc.conv(filters(l + 1), filters(l), 1, 1), true, drop});
    dec_fuse_.push_back({alloc.conv(2 * filters(l), filters(l), 3, 1), true, drop});
  }
  for (int h = 0; h < spec_.n_heads; ++h) {
    head_hidden_.push_back({alloc.conv(filters(0), filters(0), 1, 1), true, false});
    head_out_.push_back(alloc.conv(filters(0), spec_.n_classes, 1, 1));
  }
  params_.assign(alloc.size(), T(0));

  Rng trunk(derive_seed(seed, {1}));
  for (auto* units : {&enc_a_, &enc_b_, &dec_up_, &dec_fuse_})
    for (const auto& u : *units) layers::conv_init<T>(u.conv, params_, trunk);
  // Every head draws from the same stream, so the heads start identical.
  for (int h = 0; h < spec_.n_heads; ++h) {
    Rng head(derive_seed(seed, {2}));
    layers::conv_init<T>(head_hidden_[h].conv, params_, head);
    layers::conv_init<T>(head_out_[h], params_, head);
    // Start at p(background) ~ 0.99, roughly the background share of a
    // phantom, so early steps are not spent unlearning a uniform prediction.
    params_[head_out_[h].bias_offset] = T(std::log(99.0 * (spec_.n_classes - 1)));
  }
}

template <typename T>
void SegNet<T>::set_input_norm(InputNorm norm) {
  if (!norm.empty() && (int(norm.mean.size()) != spec_.in_channels || norm.sd.size() != norm.mean.size()))
    throw ShapeError("input normalisation does not match the net's input channels");
  norm_ = std::move(norm);
}

template <typename T>
std::size_t SegNet<T>::head_param_count() const {
  return head_hidden_.front().conv.param_count() + head_out_.front().param_count();
}

template <typename T>
void SegNet<T>::check_input(const Tensor<T>& input) const {
  if (input.channels() != spec_.in_channels)
    throw ShapeError("net expects " + std::to_string(spec_.in_channels) + " channels, got " +
                     std::to_string(input.channels()));
  check_min_grid(input.grid(), spec_.depth, "segmentation net");
}

template <typename T>
SoftMaskSetT<T> SegNet<T>::run(const Tensor<T>& raw_input, Rng* dropout_rng, Tape* tape) const {
  check_input(raw_input);
  const Tensor<T> input = norm_.apply(raw_input);
  using UnitAct = typename Tape::UnitAct;
  auto apply = [&](const Unit& u, const Tensor<T>& x, UnitAct* rec) {
    Tensor<T> y;
    layers::conv_forward<T>(u.conv, params_, x, y);
    if (u.relu) layers::relu_inplace(y);
    Tensor<T> mask;
    if (u.dropout && dropout_rng) {
      mask = layers::dropout_mask<T>(y.channels(), y.grid(), spec_.dropout_rate, *dropout_rng);
      layers::multiply_inplace(y, mask);
    }
    if (rec) {
      rec->out = y;
      rec->mask = std::move(mask);
    }
    return y;
  };
  const int depth = spec_.depth;
  if (tape) {
    tape->input = input;
    tape->enc_a.resize(depth);
    tape->enc_b.resize(depth);
    tape->up_in.resize(depth - 1);
    tape->dec_up.resize(depth - 1);
    tape->fuse_in.resize(depth - 1);
    tape->dec_fuse.resize(depth - 1);
    tape->head_hidden.resize(spec_.n_heads);
  }
  std::vector<Tensor<T>> skips(depth);
  for (int l = 0; l < depth; ++l) {
    Tensor<T> a = apply(enc_a_[l], l == 0 ? input : skips[l - 1], tape ? &tape->enc_a[l] : nullptr);
    skips[l] = apply(enc_b_[l], a, tape ? &tape->enc_b[l] : nullptr);
  }
  Tensor<T> cur = skips[depth - 1];
  for (int k = 0; k < depth - 1; ++k) {
    const int l = depth - 2 - k;
    Tensor<T> up = layers::upsample2(cur, skips[l].grid());
    Tensor<T> u = apply(dec_up_[k], up, tape ? &tape->dec_up[k] : nullptr);
    Tensor<T> cat = layers::concat(u, skips[l]);
    cur = apply(dec_fuse_[k], cat, tape ? &tape->dec_fuse[k] : nullptr);
    if (tape) {
      tape->up_in[k] = std::move(up);
      tape->fuse_in[k] = std::move(cat);
    }
  }
  SoftMaskSetT<T> out;
  for (int h = 0; h < spec_.n_heads; ++h) {
    Tensor<T> hidden = apply(head_hidden_[h], cur, tape ? &tape->head_hidden[h] : nullptr);
    Tensor<T> logits;
    layers::conv_forward<T>(head_out_[h], params_, hidden, logits);
    out.probs.push_back(layers::softmax(logits));
    out.logits.push_back(std::move(logits));
  }
  out.head_names = spec_.n_heads == 3 ? std::vector<std::string>{"lower", "mean", "upper"}
                                      : std::vector<std::string>{"mean"};
  if (tape) tape->masks = out;
  return out;
}

template <typename T>
SoftMaskSetT<T> SegNet<T>::forward(const Tensor<T>& input) const {
  return run(input, nullptr, nullptr);
}

template <typename T>
std::vector<SoftMaskSetT<T>> SegNet<T>::forward_mc(const Tensor<T>& input, int passes, std::uint64_t seed) const {
  if (!(spec_.dropout_rate > 0)) throw ConfigError("MC sampling needs a net built with dropout_rate > 0");
  if (passes < 1) throw ConfigError("MC sampling needs at least one pass");
  std::vector<SoftMaskSetT<T>> out;
  out.reserve(passes);
  for (int t = 0; t < passes; ++t) {
    Rng rng(derive_seed(seed, {0x3c, std::uint64_t(t)}));
    out.push_back(run(input, &rng, nullptr));
  }
  return out;
}

template <typename T>
typename SegNet<T>::Tape SegNet<T>::forward_train(const Tensor<T>& input, Rng* dropout_rng) const {
  Tape tape;
  run(input, spec_.dropout_rate > 0 ? dropout_rng : nullptr, &tape);
  return tape;
}

template <typename T>
void SegNet<T>::backward(const Tape& tape, const std::vector<Tensor<T>>& dlogits, std::span<T> grads) const {
  if (int(dlogits.size()) != spec_.n_heads) throw ShapeError("backward needs one gradient per head");
  using UnitAct = typename Tape::UnitAct;
  auto unit_back = [&](const Unit& u, const UnitAct& rec, Tensor<T> d, const Tensor<T>& in, bool need_din) {
    if (!rec.mask.empty()) layers::multiply_inplace(d, rec.mask);
    if (u.relu) layers::relu_backward_inplace(rec.out, d);
    Tensor<T> din;
    layers::conv_backward<T>(u.conv, params_, in, d, need_din ? &din : nullptr, grads);
    return din;
  };
  const int depth = spec_.depth;
  const Tensor<T>& trunk = depth > 1 ? tape.dec_fuse.back().out : tape.enc_b[0].out;

  Tensor<T> dcur(trunk.channels(), trunk.grid());
  for (int h = 0; h < spec_.n_heads; ++h) {
    Tensor<T> dhidden;
    layers::conv_backward<T>(head_out_[h], params_, tape.head_hidden[h].out, dlogits[h], &dhidden, grads);
    add_inplace(dcur, unit_back(head_hidden_[h], tape.head_hidden[h], std::move(dhidden), trunk, true));
  }

  std::vector<Tensor<T>> dskip(depth);
  for (int k = depth - 2; k >= 0; --k) {
    const int l = depth - 2 - k;
    const Tensor<T> dcat = unit_back(dec_fuse_[k], tape.dec_fuse[k], std::move(dcur), tape.fuse_in[k], true);
    Tensor<T> du, ds;
    layers::split(dcat, dec_up_[k].conv.out_ch, du, ds);
    dskip[l] = std::move(ds);
    const Tensor<T> dup = unit_back(dec_up_[k], tape.dec_up[k], std::move(du), tape.up_in[k], true);
    dcur = layers::upsample2_backward(dup, tape.enc_b[l + 1].out.grid());
  }

  // dcur now holds the gradient w.r.t. the deepest encoder output.
  for (int l = depth - 1; l >= 0; --l) {
    if (!dskip[l].empty()) add_inplace(dcur, dskip[l]);
    Tensor<T> da = unit_back(enc_b_[l], tape.enc_b[l], std::move(dcur), tape.enc_a[l].out, true);
    const Tensor<T>& in = l == 0 ? tape.input : tape.enc_b[l - 1].out;
    dcur = unit_back(enc_a_[l], tape.enc_a[l], std::move(da), in, l > 0);
  }
}

// --- RegNet --------------------------------------------------------------------

template <typename T>
RegNet<T>::RegNet(const NetSpec& spec, std::uint64_t seed) : spec_(spec), seed_(seed) {
  spec_.validate();
  if (spec_.head_kind != HeadKind::regression) throw ConfigError("RegNet needs head_kind = regression");
  Allocator alloc;
  int in = spec_.in_channels;
  for (int l = 0; l < spec_.depth; ++l) {
    const int out = spec_.base_filters << std::min(l, 1);
    convs_.push_back(alloc.conv(in, out, 3, 2));
    in = out;
  }
  const int hidden = 32;
  fc1_ = alloc.linear(in, hidden);
  fc2_ = alloc.linear(hidden, spec_.regression_outputs);
  params_.assign(alloc.size(), T(0));
  Rng rng(derive_seed(seed, {3}));
  for (const auto& c : convs_) layers::conv_init<T>(c, params_, rng);
  layers::linear_init<T>(fc1_, params_, rng);
  layers::linear_init<T>(fc2_, params_, rng);
  offset_.assign(spec_.regression_outputs, 0.0);
  scale_.assign(spec_.regression_outputs, 1.0);
}

template <typename T>
void RegNet<T>::set_input_norm(InputNorm norm) {
  if (!norm.empty() && (int(norm.mean.size()) != spec_.in_channels || norm.sd.size() != norm.mean.size()))
    throw ShapeError("input normalisation does not match the regressor's input channels");
  norm_ = std::move(norm);
}

template <typename T>
typename RegNet<T>::Tape RegNet<T>::forward_train(const Tensor<T>& input) const {
  if (input.channels() != spec_.in_channels)
    throw ShapeError("regressor expects " + std::to_string(spec_.in_channels) + " channels, got " +
                     std::to_string(input.channels()));
  check_min_grid(input.grid(), spec_.depth, "regressor");
  Tape tape;
  tape.input = norm_.apply(input);
  const Tensor<T>* x = &tape.input;
  for (const auto& c : convs_) {
    Tensor<T> y;
    layers::conv_forward<T>(c, params_, *x, y);
    layers::relu_inplace(y);
    tape.conv_out.push_back(std::move(y));
    x = &tape.conv_out.back();
  }
  const Tensor<T>& last = tape.conv_out.back();
  tape.pooled.assign(last.channels(), T(0));
  for (int c = 0; c < last.channels(); ++c) {
    T s = 0;
    for (auto v : last.channel(c)) s += v;
    tape.pooled[c] = s / T(last.voxels());
  }
  tape.hidden.assign(fc1_.out_features, T(0));
  layers::linear_forward<T>(fc1_, params_, tape.pooled, tape.hidden);
  for (auto& v : tape.hidden) v = std::max(v, T(0));
  tape.raw.assign(fc2_.out_features, T(0));
  layers::linear_forward<T>(fc2_, params_, tape.hidden, tape.raw);
  return tape;
}

template <typename T>
std::vector<double> RegNet<T>::denormalise(std::span<const T> raw) const {
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = offset_[i] + scale_[i] * double(raw[i]);
  return out;
}

template <typename T>
std::vector<double> RegNet<T>::forward(const Tensor<T>& input) const {
  return denormalise(forward_train(input).raw);
}

template <typename T>
void RegNet<T>::backward(const Tape& tape, std::span<const double> draw, std::span<T> grads) const {
  std::vector<T> dout(draw.begin(), draw.end());
  std::vector<T> dhidden(fc2_.in_features);
  layers::linear_backward<T>(fc2_, params_, tape.hidden, dout, dhidden, grads);
  for (std::size_t i = 0; i < dhidden.size(); ++i)
    if (!(tape.hidden[i] > T(0))) dhidden[i] = T(0);
  std::vector<T> dpooled(fc1_.in_features);
  layers::linear_backward<T>(fc1_, params_, tape.pooled, dhidden, dpooled, grads);
  const Tensor<T>& last = tape.conv_out.back();
  Tensor<T> d(last.channels(), last.grid());
  for (int c = 0; c < last.channels(); ++c) {
    const T v = dpooled[c] / T(last.voxels());
    for (auto& x : d.channel(c)) x = v;
  }
  for (int l = int(convs_.size()) - 1; l >= 0; --l) {
    layers::relu_backward_inplace(tape.conv_out[l], d);
    const Tensor<T>& in = l == 0 ? tape.input : tape.conv_out[l - 1];
    Tensor<T> din;
    layers::conv_backward<T>(convs_[l], params_, in, d, l > 0 ? &din : nullptr, grads);
    d = std::move(din);
  }
}

template <typename T>
Tensor<T> regressor_input(const Tensor<T>& intensities, const Tensor<T>& one_hot_segmentation) {
  if (!(intensities.grid() == one_hot_segmentation.grid()))
    throw ShapeError("segmentation grid " + one_hot_segmentation.grid().str() + " does not match image grid " +
                     intensities.grid().str());
  return layers::concat(intensities, one_hot_segmentation);
}

template <typename T>
std::vector<double> regress(const RegNet<T>& net, const Tensor<T>& intensities, const Tensor<T>& one_hot_segmentation) {
  if (one_hot_segmentation.channels() + intensities.channels() != net.spec().in_channels)
    throw ShapeError("regressor input channel count mismatch");
  return net.forward(regressor_input(intensities, one_hot_segmentation));
}

// --- training ------------------------------------------------------------------

namespace {

// Mean voxelwise cross-entropy of the one-hot target from the logits, scaled
// by w; adds w * dLoss/dlogits = w (p - g) / voxels into dlogits. Working in
// logit space keeps the gradient when a probability underflows to zero.
template <typename T>
double cross_entropy_term(const Tensor<T>& logits, const Tensor<T>& p, const Tensor<T>& g, double w,
                          Tensor<T>* dlogits) {
  const std::size_t nv = p.voxels();
  const int nc = p.channels();
  const double scale = w / double(nv);
  double loss = 0;
  for (std::size_t i = 0; i < nv; ++i) {
    double m = logits.data()[i];
    for (int c = 1; c < nc; ++c) m = std::max(m, double(logits.data()[c * nv + i]));
    double s = 0;
    for (int c = 0; c < nc; ++c) s += std::exp(double(logits.data()[c * nv + i]) - m);
    const double lse = m + std::log(s);
    for (int c = 0; c < nc; ++c) {
      const std::size_t k = c * nv + i;
      const double gk = g.data()[k];
      if (gk != 0.0) loss += gk * (lse - double(logits.data()[k]));
      if (dlogits) dlogits->data()[k] += T(scale * (double(p.data()[k]) - gk));
    }
  }
  return scale * loss;
}

template <typename T>
double foreground_loss(const SoftMaskSetT<T>& out, const Tensor<T>& target, const TrainConfig& cfg,
                       std::vector<Tensor<T>>* dprobs) {
  switch (cfg.loss) {
    case LossKind::dice: {
      if (out.n_heads() != 1) throw ConfigError("Dice training expects a single-head net");
      return losses::dice_loss(out.probs[0], target, losses::TverskyParams{}.epsilon,
                               dprobs ? &(*dprobs)[0] : nullptr);
    }
    case LossKind::triad: {
      if (out.n_heads() != 3) throw ConfigError("TriadLoss expects a three-head net");
      return losses::triad_loss(out.probs[0], out.probs[1], out.probs[2], target, {cfg.gamma},
                                dprobs ? &(*dprobs)[0] : nullptr, dprobs ? &(*dprobs)[1] : nullptr,
                                dprobs ? &(*dprobs)[2] : nullptr);
    }
    case LossKind::pinball_compound:
      break;
  }
  throw ConfigError("pinball loss cannot train a segmentation net");
}

}  // namespace

template <typename T>
double segmentation_loss(const SoftMaskSetT<T>& out, const Tensor<T>& target, const TrainConfig& cfg,
                         std::vector<Tensor<T>>* dlogits) {
  std::vector<Tensor<T>> dprobs;
  if (dlogits) dprobs.assign(out.probs.size(), Tensor<T>());
  double loss = foreground_loss(out, target, cfg, dlogits ? &dprobs : nullptr);
  if (dlogits) {
    dlogits->clear();
    for (int h = 0; h < out.n_heads(); ++h) dlogits->push_back(layers::softmax_backward(out.probs[h], dprobs[h]));
  }
  if (cfg.ce_weight > 0)
    for (int h = 0; h < out.n_heads(); ++h)
      loss += cross_entropy_term(out.logits[h], out.probs[h], target, cfg.ce_weight,
                                 dlogits ? &(*dlogits)[h] : nullptr);
  return loss;
}

TrainResult train(SegNet<float>& net, std::span<const SegExample> data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.empty()) throw ConfigError("training set is empty");
  if (cfg.loss == LossKind::triad && net.spec().n_heads != 3) throw ConfigError("TriadLoss needs a three-head net");
  if (cfg.loss == LossKind::dice && net.spec().n_heads != 1) throw ConfigError("Dice loss needs a single-head net");
  if (cfg.loss == LossKind::pinball_compound) throw ConfigError("pinball loss cannot train a segmentation net");

  Adam<float> opt(net.param_count(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
  std::vector<float> grads(net.param_count());
  TrainResult result;
  std::vector<std::size_t> order(data.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffler(derive_seed(cfg.seed, {0xE0, std::uint64_t(epoch)}));
    shuffle(order, shuffler);
    double epoch_loss = 0;
    int batch = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + std::size_t(cfg.batch_size));
      std::fill(grads.begin(), grads.end(), 0.0f);
      for (std::size_t i = start; i < end; ++i) {
        const SegExample& ex = data[order[i]];
        const Tensor<float> target = phantom::one_hot<float>(*ex.labels, ex.image->grid(), net.spec().n_classes);
        Rng dropout(derive_seed(cfg.seed, {0xD0, std::uint64_t(epoch), std::uint64_t(i)}));
        const auto tape = net.forward_train(*ex.image, &dropout);
        std::vector<Tensor<float>> dlogits;
        const double loss = segmentation_loss(tape.masks, target, cfg, &dlogits);
        if (!std::isfinite(loss))
          throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch));
        net.backward(tape, dlogits, grads);
        epoch_loss += loss;
      }
      const float inv = 1.0f / float(end - start);
      for (auto& g : grads) g *= inv;
      opt.step(net.params(), grads);
    }
    result.loss_trace.push_back(epoch_loss / double(data.size()));
    if (on_epoch) on_epoch(epoch, result.loss_trace.back());
  }
  return result;
}

TrainResult train_regressor(RegNet<float>& net, std::span<const RegExample> data, const TrainConfig& cfg,
                            const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.empty()) throw ConfigError("training set is empty");
  if (cfg.loss != LossKind::pinball_compound) throw ConfigError("the regressor trains with the compound pinball loss");
  const std::size_t n_out = std::size_t(net.spec().regression_outputs);
  const std::size_t n_cls = n_out / 3;
  for (const auto& ex : data)
    if (ex.targets.size() != n_cls) throw ShapeError("regression target length mismatch");

  // Standardise targets per class; the pinball loss is positively homogeneous,
  // so the minimiser in standardised units maps back to the same quantiles.
  std::vector<double> mean(n_cls, 0.0), sd(n_cls, 0.0);
  for (const auto& ex : data)
    for (std::size_t c = 0; c < n_cls; ++c) mean[c] += ex.targets[c] / double(data.size());
  for (const auto& ex : data)
    for (std::size_t c = 0; c < n_cls; ++c) sd[c] += std::pow(ex.targets[c] - mean[c], 2) / double(data.size());
  for (std::size_t c = 0; c < n_cls; ++c) {
    sd[c] = std::max(std::sqrt(sd[c]), 1e-6);
    for (int k = 0; k < 3; ++k) {
      net.output_offset()[3 * c + k] = mean[c];
      net.output_scale()[3 * c + k] = sd[c];
    }
  }

  Adam<float> opt(net.param_count(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
  std::vector<float> grads(net.param_count());
  TrainResult result;
  std::vector<std::size_t> order(data.size());
  std::vector<double> raw(n_out), z(n_cls), draw(n_out);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffler(derive_seed(cfg.seed, {0xE1, std::uint64_t(epoch)}));
    shuffle(order, shuffler);
    double epoch_loss = 0;
    int batch = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + std::size_t(cfg.batch_size));
      std::fill(grads.begin(), grads.end(), 0.0f);
      for (std::size_t i = start; i < end; ++i) {
        const RegExample& ex = data[order[i]];
        const auto tape = net.forward_train(ex.input);
        for (std::size_t k = 0; k < n_out; ++k) raw[k] = tape.raw[k];
        for (std::size_t c = 0; c < n_cls; ++c) z[c] = (ex.targets[c] - mean[c]) / sd[c];
        losses::pinball_compound_loss(raw, z, cfg.alpha, draw);
        std::vector<double> preds(n_out);
        for (std::size_t k = 0; k < n_out; ++k) preds[k] = net.output_offset()[k] + net.output_scale()[k] * raw[k];
        const double loss = losses::pinball_compound_loss(preds, ex.targets, cfg.alpha);
        if (!std::isfinite(loss))
          throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch));
        net.backward(tape, draw, grads);
        epoch_loss += loss;
      }
      const float inv = 1.0f / float(end - start);
      for (auto& g : grads) g *= inv;
      opt.step(net.params(), grads);
    }
    result.loss_trace.push_back(epoch_loss / double(data.size()));
    if (on_epoch) on_epoch(epoch, result.loss_trace.back());
  }
  return result;
}

// --- checkpoints ---------------------------------------------------------------

namespace {

std::string loss_name(LossKind k) {
  switch (k) {
    case LossKind::dice: return "dice";
    case LossKind::triad: return "triad";
    case LossKind::pinball_compound: return "pinball_compound";
  }
  return "dice";
}

LossKind loss_from_name(const std::string& s) {
  if (s == "dice") return LossKind::dice;
  if (s == "triad") return LossKind::triad;
  if (s == "pinball_compound") return LossKind::pinball_compound;
  throw ConfigError("unknown loss '" + s + "'");
}

void write_checkpoint(const fs::path& dir, const std::string& kind, const NetSpec& spec, std::uint64_t seed,
                      const InputNorm& norm, const TrainConfig& cfg, const std::vector<double>& trace, std::span<const float> params,
                      const std::vector<double>& extra) {
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "model.bin", std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot write " + (dir / "model.bin").string());
    f.write(reinterpret_cast<const char*>(params.data()), std::streamsize(params.size_bytes()));
    f.write(reinterpret_cast<const char*>(extra.data()), std::streamsize(extra.size() * sizeof(double)));
  }
  json j{{"kind", kind},
         {"net", spec},
         {"train", cfg},
         {"seed", seed},
         {"input_norm", {{"mean", norm.mean}, {"sd", norm.sd}}},
         {"param_count", params.size()},
         {"loss_trace", trace},
         {"model_bin_hash", git_blob_sha1_file(dir / "model.bin")}};
  std::ofstream(dir / "model.json") << j.dump(2) << "\n";
}

std::vector<char> read_model_bin(const fs::path& dir, const CheckpointInfo& info) {
  const fs::path p = dir / "model.bin";
  if (git_blob_sha1_file(p) != info.content_hash)
    throw FormatError(p.string() + ": content hash does not match model.json");
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

void save_checkpoint(const fs::path& dir, const SegNet<float>& net, const TrainConfig& cfg,
                     const std::vector<double>& loss_trace) {
  write_checkpoint(dir, "segmentation", net.spec(), net.seed(), net.input_norm(), cfg, loss_trace, net.params(), {});
}

void save_checkpoint(const fs::path& dir, const RegNet<float>& net, const TrainConfig& cfg,
                     const std::vector<double>& loss_trace) {
  std::vector<double> extra = net.output_offset();
  extra.insert(extra.end(), net.output_scale().begin(), net.output_scale().end());
  write_checkpoint(dir, "regression", net.spec(), net.seed(), net.input_norm(), cfg, loss_trace, net.params(), extra);
}

CheckpointInfo read_checkpoint_info(const fs::path& dir) {
  const fs::path p = dir / "model.json";
  std::ifstream f(p);
  if (!f) throw MissingArtifact("missing checkpoint " + p.string());
  try {
    const json j = json::parse(f);
    CheckpointInfo info;
    info.kind = j.at("kind").get<std::string>();
    info.spec = j.at("net").get<NetSpec>();
    info.train = j.at("train").get<TrainConfig>();
    info.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("input_norm")) {
      info.input_norm.mean = j.at("input_norm").at("mean").get<std::vector<double>>();
      info.input_norm.sd = j.at("input_norm").at("sd").get<std::vector<double>>();
    }
    info.loss_trace = j.at("loss_trace").get<std::vector<double>>();
    info.content_hash = j.at("model_bin_hash").get<std::string>();
    return info;
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

SegNet<float> load_segnet(const fs::path& dir) {
  const auto info = read_checkpoint_info(dir);
  if (info.kind != "segmentation") throw FormatError(dir.string() + " is not a segmentation checkpoint");
  SegNet<float> net(info.spec, info.seed);
  net.set_input_norm(info.input_norm);
  const auto bytes = read_model_bin(dir, info);
  if (bytes.size() != net.param_count() * sizeof(float))
    throw FormatError("model.bin size does not match the network in model.json");
  std::memcpy(net.params().data(), bytes.data(), bytes.size());
  return net;
}

RegNet<float> load_regnet(const fs::path& dir) {
  const auto info = read_checkpoint_info(dir);
  if (info.kind != "regression") throw FormatError(dir.string() + " is not a regression checkpoint");
  RegNet<float> net(info.spec, info.seed);
  net.set_input_norm(info.input_norm);
  const auto bytes = read_model_bin(dir, info);
  const std::size_t n_out = std::size_t(info.spec.regression_outputs);
  const std::size_t pbytes = net.param_count() * sizeof(float);
  if (bytes.size() != pbytes + 2 * n_out * sizeof(double))
    throw FormatError("model.bin size does not match the network in model.json");
  std::memcpy(net.params().data(), bytes.data(), pbytes);
  std::memcpy(net.output_offset().data(), bytes.data() + pbytes, n_out * sizeof(double));
  std::memcpy(net.output_scale().data(), bytes.data() + pbytes + n_out * sizeof(double), n_out * sizeof(double));
  return net;
}

void to_json(json& j, const NetSpec& s) {
  j = json{{"in_channels", s.in_channels},
           {"n_classes", s.n_classes},
           {"base_filters", s.base_filters},
           {"depth", s.depth},
           {"n_heads", s.n_heads},
           {"dropout_rate", s.dropout_rate},
           {"head_kind", s.head_kind == HeadKind::segmentation ? "segmentation" : "regression"},
           {"regression_outputs", s.regression_outputs}};
}

void from_json(const json& j, NetSpec& s) {
  s = NetSpec{};
  s.in_channels = j.value("in_channels", s.in_channels);
  s.n_classes = j.value("n_classes", s.n_classes);
  s.base_filters = j.value("base_filters", s.base_filters);
  s.depth = j.value("depth", s.depth);
  s.n_heads = j.value("n_heads", s.n_heads);
  s.dropout_rate = j.value("dropout_rate", s.dropout_rate);
  const std::string kind = j.value("head_kind", std::string("segmentation"));
  if (kind != "segmentation" && kind != "regression") throw ConfigError("unknown head_kind '" + kind + "'");
  s.head_kind = kind == "segmentation" ? HeadKind::segmentation : HeadKind::regression;
  s.regression_outputs = j.value("regression_outputs", s.regression_outputs);
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"learning_rate", c.learning_rate}, {"epochs", c.epochs},         {"batch_size", c.batch_size},
           {"adam_beta1", c.adam_beta1},       {"adam_beta2", c.adam_beta2}, {"adam_epsilon", c.adam_epsilon},
           {"loss", loss_name(c.loss)},        {"gamma", c.gamma},           {"alpha", c.alpha},
           {"ce_weight", c.ce_weight}, {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
  c.loss = loss_from_name(j.value("loss", std::string("dice")));
  c.gamma = j.value("gamma", c.gamma);
  c.alpha = j.value("alpha", c.alpha);
  c.ce_weight = j.value("ce_weight", c.ce_weight);
  c.seed = j.value("seed", c.seed);
}

template struct SoftMaskSetT<float>;
template struct SoftMaskSetT<double>;
template class Adam<float>;
template class Adam<double>;
template class SegNet<float>;
template class SegNet<double>;
template class RegNet<float>;
template class RegNet<double>;
template Tensor<float> regressor_input<float>(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> regressor_input<double>(const Tensor<double>&, const Tensor<double>&);
template std::vector<double> regress<float>(const RegNet<float>&, const Tensor<float>&, const Tensor<float>&);
template std::vector<double> regress<double>(const RegNet<double>&, const Tensor<double>&, const Tensor<double>&);
template double segmentation_loss<float>(const SoftMaskSetT<float>&, const Tensor<float>&, const TrainConfig&,
                                         std::vector<Tensor<float>>*);
template double segmentation_loss<double>(const SoftMaskSetT<double>&, const Tensor<double>&, const TrainConfig&,
                                          std::vector<Tensor<double>>*);

}  // namespace triadpi::nets
