#include "vmamba/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <set>
#include <sstream>

#include "vmamba/error.hpp"

namespace vmamba::training {

using vmamba::to_string;

std::string_view to_string(Precision p) { return p == Precision::f32 ? "single" : "double"; }

Precision parse_precision(std::string_view text) {
  if (text == "single") return Precision::f32;
  if (text == "double") return Precision::f64;
  throw ValidationError("unknown precision '" + std::string(text) + "' (expected single or double)");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ValidationError("train config: learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ValidationError("train config: beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("train config: beta2 must lie in [0, 1)");
  if (!(eps > 0.0)) throw ValidationError("train config: eps must be positive");
  if (batch_size == 0) throw ValidationError("train config: batch_size must be at least 1");
}

nlohmann::json TrainConfig::to_json() const {
  return nlohmann::json{{"learning_rate", learning_rate}, {"beta1", beta1},
                        {"beta2", beta2},                 {"eps", eps},
                        {"epochs", epochs},               {"batch_size", batch_size},
                        {"seed", seed},                   {"precision", std::string(training::to_string(precision))},
                        {"scan", std::string(ssm::to_string(scan))}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& doc, TrainConfig c) {
  if (!doc.is_object()) throw ValidationError("train config must be a JSON object");
  static const std::set<std::string> known{"learning_rate", "beta1", "beta2", "eps",  "epochs",
                                           "batch_size",    "seed",  "precision", "scan"};
  for (const auto& [key, _] : doc.items())
    if (!known.contains(key)) throw ValidationError("train config: unknown key '" + key + "'");
  try {
    if (doc.contains("learning_rate")) c.learning_rate = doc.at("learning_rate").get<double>();
    if (doc.contains("beta1")) c.beta1 = doc.at("beta1").get<double>();
    if (doc.contains("beta2")) c.beta2 = doc.at("beta2").get<double>();
    if (doc.contains("eps")) c.eps = doc.at("eps").get<double>();
    if (doc.contains("epochs")) c.epochs = doc.at("epochs").get<std::size_t>();
    if (doc.contains("batch_size")) c.batch_size = doc.at("batch_size").get<std::size_t>();
    if (doc.contains("seed")) c.seed = doc.at("seed").get<std::uint64_t>();
    if (doc.contains("precision")) c.precision = parse_precision(doc.at("precision").get<std::string>());
    if (doc.contains("scan")) c.scan = ssm::parse_scan_mode(doc.at("scan").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  return c;
}

// ------------------------------------------------------------------- loss --

double cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size())
    throw ValidationError("cross_entropy: label " + std::to_string(label) + " outside " +
                          std::to_string(logits.size()) + " classes");
  const double top = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - top);
  return top + std::log(sum) - logits[label];
}

double cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ShapeError("cross_entropy: logits " + to_string(logits.shape()) + " for " + std::to_string(labels.size()) +
                     " labels");
  const std::size_t k = logits.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    total += cross_entropy(logits.data().subspan(i * k, k), labels[i]);
  return total / static_cast<double>(labels.size());
}

// ------------------------------------------------------------------- adam --

AdamState AdamState::zeros_like(const ParameterSet& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.value.shape());
    s.v.emplace_back(p.value.shape());
  }
  return s;
}

void adam_step(ParameterSet& params, AdamState& state, const TrainConfig& config) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeError("adam_step: optimiser state covers " + std::to_string(state.m.size()) + " of " +
                     std::to_string(params.size()) + " parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(config.beta1, t);
  const double correct2 = 1.0 - std::pow(config.beta2, t);
  std::size_t i = 0;
  for (auto& p : params) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    ++i;
    if (m.shape() != p.value.shape() || v.shape() != p.value.shape() || p.grad.shape() != p.value.shape())
      throw ShapeError("adam_step: state shape mismatch for '" + p.name + "'");
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
      const double m_hat = m[j] / correct1;
      const double v_hat = v[j] / correct2;
      p.value[j] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.eps);
    }
  }
}

// ---------------------------------------------------------------- history --

std::string history_csv(std::span<const EpochRecord> history) {
  std::string out = "epoch,train_loss,eval_loss,eval_accuracy\n";
  char buf[128];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g\n", r.epoch, r.train_loss, r.eval_loss, r.eval_accuracy);
    out += buf;
  }
  return out;
}

Tensor stack_volumes(std::span<const dataset::Sample* const> batch) {
  if (batch.empty()) throw ValidationError("empty batch");
  const Shape& shape = batch.front()->voxels.shape();
  Shape stacked{batch.size()};
  stacked.insert(stacked.end(), shape.begin(), shape.end());
  Tensor out(stacked);
  const std::size_t n = batch.front()->voxels.size();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i]->voxels.shape() != shape)
      throw ShapeError("batch mixes volume extents " + to_string(shape) + " and " +
                       to_string(batch[i]->voxels.shape()));
    std::copy_n(batch[i]->voxels.ptr(), n, out.ptr() + i * n);
  }
  return out;
}

Evaluation evaluate(model::Model& model, std::span<const dataset::Sample> samples, ssm::ScanMode scan,
                    std::size_t batch_size) {
  if (samples.empty()) throw ValidationError("evaluate: no samples");
  Evaluation ev;
  std::vector<volume::ClassLabel> truths;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    std::vector<const dataset::Sample*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&samples[i]);
    Graph g;
    const Tensor& logits = g.value(model.forward_logits(g, stack_volumes(batch), ops::NormMode::eval, scan));
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto row = logits.data().subspan(i * k, k);
      const std::size_t truth = volume::index_of(batch[i]->label);
      loss_sum += cross_entropy(row, truth);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      ev.predictions.push_back(volume::label_from_index(best));
      truths.push_back(batch[i]->label);
    }
  }
  ev.loss = loss_sum / static_cast<double>(samples.size());
  ev.confusion = metrics::confusion(ev.predictions, truths);
  ev.accuracy = metrics::accuracy(ev.confusion);
  return ev;
}

// ------------------------------------------------------------- checkpoint --

namespace {

constexpr std::array<char, 8> kMagic{'V', 'M', 'A', 'M', 'B', 'A', 'C', 'K'};

class Writer {
 public:
  template <typename T>
  void put(T value) {
    auto raw = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(value);
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    bytes_.insert(bytes_.end(), raw.begin(), raw.end());
  }
  void put_raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void put_string(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_raw(s.data(), s.size());
  }
  void put_tensor(const Tensor& t) {
    put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(d);
    for (double v : t.data()) put<double>(v);
  }
  // Appends `tag`, the payload length and the payload.
  void put_section(const char (&tag)[5], const Writer& payload) {
    put_raw(tag, 4);
    put<std::uint64_t>(payload.bytes_.size());
    put_raw(payload.bytes_.data(), payload.bytes_.size());
  }
  Bytes take() { return std::move(bytes_); }

 private:
  Bytes bytes_;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  void need(std::size_t n, std::string_view what) const {
    if (size_ - pos_ < n)
      throw FormatError("checkpoint: corrupt length, " + std::string(what) + " needs " + std::to_string(n) +
                        " bytes but only " + std::to_string(size_ - pos_) + " remain");
  }
  template <typename T>
  T get(std::string_view what) {
    need(sizeof(T), what);
    std::array<std::uint8_t, sizeof(T)> raw{};
    std::memcpy(raw.data(), data_ + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    pos_ += sizeof(T);
    return std::bit_cast<T>(raw);
  }
  std::string get_string(std::string_view what) {
    const auto n = get<std::uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  Tensor get_tensor(std::string_view what) {
    const auto rank = get<std::uint32_t>(what);
    if (rank > 8) throw FormatError("checkpoint: corrupt tensor rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = get<std::uint64_t>(what);
      if (d == 0 || count > (size_ - pos_) / d) throw FormatError("checkpoint: corrupt length in tensor extents");
      count *= d;
    }
    need(count * sizeof(double), what);
    std::vector<double> values(count);
    for (auto& v : values) v = get<double>(what);
    return Tensor(std::move(shape), std::move(values));
  }
  Reader section(const char (&tag)[5]) {
    need(4, "section tag");
    if (std::memcmp(data_ + pos_, tag, 4) != 0)
      throw FormatError("checkpoint: expected section '" + std::string(tag) + "'");
    pos_ += 4;
    const auto len = get<std::uint64_t>("section length");
    need(len, std::string("section ") + tag);
    Reader sub(data_ + pos_, static_cast<std::size_t>(len));
    pos_ += static_cast<std::size_t>(len);
    return sub;
  }
  std::uint64_t get_count(std::size_t min_item_bytes, std::string_view what) {
    const auto n = get<std::uint64_t>(what);
    if (n > (size_ - pos_) / std::max<std::size_t>(min_item_bytes, 1))
      throw FormatError("checkpoint: corrupt length, " + std::string(what) + " count " + std::to_string(n));
    return n;
  }
  void finish(std::string_view what) const {
    if (pos_ != size_) throw FormatError("checkpoint: trailing bytes in " + std::string(what));
  }
  std::size_t pos() const { return pos_; }
  const std::uint8_t* data() const { return data_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace

Bytes checkpoint_save(const Checkpoint& c) {
  if (c.adam.m.size() != c.parameters.size() || c.adam.v.size() != c.parameters.size())
    throw ValidationError("checkpoint: optimiser state does not cover every parameter");
  if (c.norm_mean.size() != c.norm_var.size()) throw ValidationError("checkpoint: unpaired normalisation buffers");
  Writer out;
  out.put_raw(kMagic.data(), kMagic.size());
  out.put<std::uint32_t>(Checkpoint::kVersion);

  Writer conf;
  const nlohmann::json doc{{"model", c.model_config.to_json()}, {"train", c.train_config.to_json()}};
  conf.put_string(doc.dump());
  out.put_section("CONF", conf);

  Writer params;
  params.put<std::uint64_t>(c.parameters.size());
  for (const auto& p : c.parameters) {
    params.put_string(p.name);
    params.put_tensor(p.value);
  }
  out.put_section("PARM", params);

  Writer norms;
  norms.put<std::uint64_t>(c.norm_mean.size());
  for (std::size_t i = 0; i < c.norm_mean.size(); ++i) {
    norms.put_string(c.norm_mean[i].name);
    norms.put_tensor(c.norm_mean[i].value);
    norms.put_tensor(c.norm_var[i].value);
  }
  out.put_section("NORM", norms);

  Writer adam;
  adam.put<std::uint64_t>(c.adam.step);
  adam.put<std::uint64_t>(c.adam.m.size());
  for (std::size_t i = 0; i < c.adam.m.size(); ++i) {
    adam.put_string(c.parameters[i].name);
    adam.put_tensor(c.adam.m[i]);
    adam.put_tensor(c.adam.v[i]);
  }
  out.put_section("ADAM", adam);

  Writer state;
  state.put<std::uint64_t>(c.epoch);
  state.put_string(c.rng_state);
  state.put<std::uint64_t>(c.history.size());
  for (const auto& r : c.history) {
    state.put<std::uint64_t>(r.epoch);
    state.put<double>(r.train_loss);
    state.put<double>(r.eval_loss);
    state.put<double>(r.eval_accuracy);
  }
  out.put_section("STAT", state);
  return out.take();
}

Checkpoint checkpoint_load(const Bytes& bytes) {
  Reader in(bytes.data(), bytes.size());
  in.need(kMagic.size(), "magic");
  if (std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) throw FormatError("checkpoint: bad magic");
  for (std::size_t i = 0; i < kMagic.size(); ++i) in.get<std::uint8_t>("magic");
  const auto version = in.get<std::uint32_t>("version");
  if (version != Checkpoint::kVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (this build reads " +
                      std::to_string(Checkpoint::kVersion) + ")");

  Checkpoint c;
  {
    Reader conf = in.section("CONF");
    try {
      const auto doc = nlohmann::json::parse(conf.get_string("config"));
      c.model_config = model::ModelConfig::from_json(doc.at("model"));
      c.train_config = TrainConfig::from_json(doc.at("train"));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("checkpoint: config section: ") + e.what());
    } catch (const ValidationError& e) {
      throw FormatError(std::string("checkpoint: config section: ") + e.what());
    }
    conf.finish("CONF");
  }
  {
    Reader params = in.section("PARM");
    const auto n = params.get_count(8, "parameter");
    for (std::uint64_t i = 0; i < n; ++i) {
      NamedTensor p;
      p.name = params.get_string("parameter name");
      p.value = params.get_tensor("parameter value");
      c.parameters.push_back(std::move(p));
    }
    params.finish("PARM");
  }
  {
    Reader norms = in.section("NORM");
    const auto n = norms.get_count(8, "norm");
    for (std::uint64_t i = 0; i < n; ++i) {
      std::string name = norms.get_string("norm name");
      Tensor mean = norms.get_tensor("running mean");
      Tensor var = norms.get_tensor("running var");
      c.norm_mean.push_back({name, std::move(mean)});
      c.norm_var.push_back({std::move(name), std::move(var)});
    }
    norms.finish("NORM");
  }
  {
    Reader adam = in.section("ADAM");
    c.adam.step = adam.get<std::uint64_t>("adam step");
    const auto n = adam.get_count(8, "adam moment");
    if (n != c.parameters.size()) throw FormatError("checkpoint: optimiser state does not match the parameter table");
    for (std::uint64_t i = 0; i < n; ++i) {
      if (adam.get_string("adam name") != c.parameters[i].name)
        throw FormatError("checkpoint: optimiser state out of order at '" + c.parameters[i].name + "'");
      c.adam.m.push_back(adam.get_tensor("first moment"));
      c.adam.v.push_back(adam.get_tensor("second moment"));
    }
    adam.finish("ADAM");
  }
  {
    Reader state = in.section("STAT");
    c.epoch = state.get<std::uint64_t>("epoch");
    c.rng_state = state.get_string("rng state");
    const auto n = state.get_count(32, "history");
    for (std::uint64_t i = 0; i < n; ++i) {
      EpochRecord r;
      r.epoch = state.get<std::uint64_t>("history epoch");
      r.train_loss = state.get<double>("train loss");
      r.eval_loss = state.get<double>("eval loss");
      r.eval_accuracy = state.get<double>("eval accuracy");
      c.history.push_back(r);
    }
    state.finish("STAT");
  }
  in.finish("checkpoint");
  return c;
}

std::string checkpoint_id(const Bytes& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

model::Model restore_model(const Checkpoint& c) {
  model::Model m(c.model_config);
  auto& params = m.parameters();
  if (params.size() != c.parameters.size())
    throw FormatError("checkpoint: " + std::to_string(c.parameters.size()) + " parameters stored, model has " +
                      std::to_string(params.size()));
  std::size_t i = 0;
  for (auto& p : params) {
    const auto& stored = c.parameters[i++];
    if (stored.name != p.name || stored.value.shape() != p.value.shape())
      throw FormatError("checkpoint: parameter '" + stored.name + "' " + to_string(stored.value.shape()) +
                        " does not match model parameter '" + p.name + "' " + to_string(p.value.shape()));
    p.value = stored.value;
  }
  auto norms = m.norm_states();
  if (norms.size() != c.norm_mean.size()) throw FormatError("checkpoint: normalisation buffer count mismatch");
  for (std::size_t k = 0; k < norms.size(); ++k) {
    auto& [name, state] = norms[k];
    if (c.norm_mean[k].name != name || c.norm_mean[k].value.shape() != state->running_mean.shape() ||
        c.norm_var[k].value.shape() != state->running_var.shape())
      throw FormatError("checkpoint: normalisation buffer '" + c.norm_mean[k].name + "' does not match '" + name + "'");
    state->running_mean = c.norm_mean[k].value;
    state->running_var = c.norm_var[k].value;
  }
  return m;
}

// ---------------------------------------------------------------- trainer --

namespace {

TrainConfig checked(TrainConfig c) {
  c.validate();
  if (c.precision == Precision::f32)
    throw ValidationError("training runs in double precision; single precision applies to the scan kernels only");
  return c;
}

}  // namespace

Trainer::Trainer(model::ModelConfig model_config, TrainConfig config)
    : config_(checked(config)),
      model_(std::move(model_config)),
      adam_(AdamState::zeros_like(model_.parameters())),
      rng_(config_.seed) {}

Trainer::Trainer(const Checkpoint& c)
    : config_(checked(c.train_config)), model_(restore_model(c)), adam_(c.adam), epoch_(c.epoch), history_(c.history) {
  if (adam_.m.size() != model_.parameters().size()) throw FormatError("checkpoint: optimiser state size mismatch");
  std::istringstream in(c.rng_state);
  in >> rng_;
  if (!in) throw FormatError("checkpoint: unreadable RNG state");
}

double Trainer::step(std::span<const dataset::Sample* const> batch) {
  std::vector<std::size_t> labels;
  for (const auto* s : batch) labels.push_back(volume::index_of(s->label));
  auto& params = model_.parameters();
  params.zero_grad();
  double loss = 0.0;
  try {
    Graph g;
    Var logits = model_.forward_logits(g, stack_volumes(batch), ops::NormMode::train, config_.scan);
    Var l = ops::cross_entropy(g, logits, labels);
    loss = g.value(l).item();
    if (!std::isfinite(loss)) throw NumericError("loss is " + std::to_string(loss));
    g.backward(l);
  } catch (const NumericError& e) {
    throw DivergenceError("training diverged at epoch " + std::to_string(epoch_ + 1) + ", step " +
                          std::to_string(adam_.step + 1) + ": " + e.what());
  }
  for (const auto& p : params)
    if (!p.grad.all_finite())
      throw DivergenceError("training diverged at epoch " + std::to_string(epoch_ + 1) + ": gradient of '" + p.name +
                            "' is not finite");
  adam_step(params, adam_, config_);
  return loss;
}

EpochRecord Trainer::run_epoch(std::span<const dataset::Sample> train, std::span<const dataset::Sample> eval) {
  if (train.empty()) throw ValidationError("training set is empty");
  if (eval.empty()) throw ValidationError("evaluation set is empty");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng_);

  double loss_sum = 0.0;
  for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
    const std::size_t end = std::min(order.size(), start + config_.batch_size);
    std::vector<const dataset::Sample*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&train[order[i]]);
    loss_sum += step(batch) * static_cast<double>(batch.size());
  }
  const Evaluation ev = evaluate(model_, eval, config_.scan);
  EpochRecord r{++epoch_, loss_sum / static_cast<double>(train.size()), ev.loss, ev.accuracy};
  history_.push_back(r);
  return r;
}

void Trainer::run(std::span<const dataset::Sample> train, std::span<const dataset::Sample> eval,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  while (epoch_ < config_.epochs) {
    const EpochRecord r = run_epoch(train, eval);
    if (on_epoch) on_epoch(r);
  }
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.model_config = model_.config();
  c.train_config = config_;
  for (const auto& p : model_.parameters()) c.parameters.push_back({p.name, p.value});
  for (const auto& [name, state] : model_.norm_states()) {
    c.norm_mean.push_back({name, state->running_mean});
    c.norm_var.push_back({name, state->running_var});
  }
  c.adam = adam_;
  c.epoch = epoch_;
  std::ostringstream rng;
  rng << rng_;
  c.rng_state = rng.str();
  c.history = history_;
  return c;
}

}  // namespace vmamba::training
