#pragma once

// Training / evaluation driver, retaining-probability sweeps, CSV metrics,
// the per-layer model-count report and parameter persistence.

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mpdrop/arch.hpp"
#include "mpdrop/data.hpp"
#include "mpdrop/network.hpp"

namespace mpd {

enum class DatasetKind { mnist, cifar10, cifar100 };

[[nodiscard]] inline DatasetKind parse_dataset_kind(std::string_view s) {
  if (s == "mnist") return DatasetKind::mnist;
  if (s == "cifar10") return DatasetKind::cifar10;
  if (s == "cifar100") return DatasetKind::cifar100;
  throw ParameterError("unknown dataset '" + std::string(s) + "'");
}

struct ExperimentConfig {
  DatasetKind dataset = DatasetKind::mnist;
  std::filesystem::path data_dir;
  std::string arch = "mnist";  // preset name or architecture string
  TrainPoolMode train_pool = TrainPoolMode::max_dropout;
  TestPoolMode test_pool = TestPoolMode::prob_weighted;
  double p = 0.5;
  std::optional<double> fc_dropout_p;
  std::optional<std::size_t> epochs;  // default: 10 for MNIST, 15 for CIFAR
  std::size_t batch_size = 100;
  double lr = 0.1;
  double momentum = 0.95;
  double weight_std = 0.1;
  std::uint64_t seed = 1;
  std::size_t train_limit = 0;  // 0 = use every example
  std::size_t test_limit = 0;
  bool shuffle = true;
  bool record_wall_time = true;
  bool allow_cross_pairing = false;

  [[nodiscard]] std::size_t epoch_count() const {
    return epochs.value_or(dataset == DatasetKind::mnist ? 10 : 15);
  }
};

// Throws ParameterError for out-of-range values or a stochastic / dropout
// train-test mismatch (unless allow_cross_pairing is set).
inline void validate(const ExperimentConfig& cfg) {
  (void)RetainProb(cfg.p);
  if (cfg.fc_dropout_p) (void)RetainProb(*cfg.fc_dropout_p);
  if (cfg.batch_size < 1) throw ParameterError("batch size must be >= 1");
  if (cfg.epoch_count() < 1) throw ParameterError("epochs must be >= 1");
  if (!(cfg.lr > 0.0)) throw ParameterError("learning rate must be > 0");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) {
    throw ParameterError("momentum must lie in [0, 1)");
  }
  const bool stochastic_train = cfg.train_pool == TrainPoolMode::stochastic;
  const bool stochastic_test = cfg.test_pool == TestPoolMode::stochastic_weighted;
  if (stochastic_train != stochastic_test && !cfg.allow_cross_pairing) {
    throw ParameterError("train pool '" + std::string(to_string(cfg.train_pool)) +
                         "' does not pair with test pool '" +
                         std::string(to_string(cfg.test_pool)) +
                         "' (stochastic trains with stochastic_weighted; pass --allow-cross-pairing "
                         "to override)");
  }
}

[[nodiscard]] inline PassConfig pass_config(const ExperimentConfig& cfg) {
  PassConfig pass;
  pass.train_pool = cfg.train_pool;
  pass.test_pool = cfg.test_pool;
  pass.pool_p = RetainProb(cfg.p);
  if (cfg.fc_dropout_p) pass.fc_p = RetainProb(*cfg.fc_dropout_p);
  return pass;
}

struct DataSplits {
  Dataset train;
  Dataset test;
};

// Loads and preprocesses the configured dataset from cfg.data_dir using the
// published file names.
[[nodiscard]] inline DataSplits load_datasets(const ExperimentConfig& cfg) {
  const auto& dir = cfg.data_dir;
  DataSplits splits;
  switch (cfg.dataset) {
    case DatasetKind::mnist:
      splits.train = preprocess(
          load_mnist(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte"),
          PreprocessMode::mnist);
      splits.test = preprocess(
          load_mnist(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte"),
          PreprocessMode::mnist);
      break;
    case DatasetKind::cifar10: {
      std::vector<std::filesystem::path> batches;
      for (int i = 1; i <= 5; ++i) batches.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
      const std::array<std::filesystem::path, 1> test_batch{dir / "test_batch.bin"};
      splits.train = preprocess(load_cifar10(batches), PreprocessMode::cifar);
      splits.test = preprocess(load_cifar10(test_batch), PreprocessMode::cifar,
                               splits.train.channel_means);
      break;
    }
    case DatasetKind::cifar100:
      splits.train = preprocess(load_cifar100(dir / "train.bin"), PreprocessMode::cifar);
      splits.test = preprocess(load_cifar100(dir / "test.bin"), PreprocessMode::cifar,
                               splits.train.channel_means);
      break;
  }
  if (cfg.train_limit != 0) splits.train = take_front(splits.train, cfg.train_limit);
  if (cfg.test_limit != 0) splits.test = take_front(splits.test, cfg.test_limit);
  return splits;
}

struct MetricsRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double test_error_percent = 0.0;
  double wall_seconds = 0.0;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

struct TrainingResult {
  std::vector<MetricsRecord> records;
  Network network;

  [[nodiscard]] double final_error() const { return records.back().test_error_percent; }
  [[nodiscard]] double best_error() const {
    double best = records.front().test_error_percent;
    for (const auto& r : records) best = std::min(best, r.test_error_percent);
    return best;
  }
};

// Percentage of examples whose argmax logit differs from the label.
[[nodiscard]] inline double evaluate(const Network& net, const Dataset& data,
                                     const PassConfig& pass, std::size_t chunk = 500) {
  if (data.size() == 0) return 0.0;
  std::size_t wrong = 0;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t end = std::min(data.size(), start + chunk);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Batch batch = gather_batch(data, idx);
    const Tensor4<double> logits = net.forward_test(batch.images, pass);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto z = logits.item(b);
      const auto best = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
      if (best != batch.labels[b]) ++wrong;
    }
  }
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(data.size());
}

[[nodiscard]] inline double evaluate(const Network& net, const Dataset& data,
                                     TestPoolMode mode, double p,
                                     std::optional<double> fc_dropout_p = {}) {
  PassConfig pass;
  pass.test_pool = mode;
  pass.pool_p = RetainProb(p);
  if (fc_dropout_p) pass.fc_p = RetainProb(*fc_dropout_p);
  return evaluate(net, data, pass);
}

// Seeded streams: weights, batch order and pooling/dropout noise are
// independent so changing the pooling mode never perturbs the other two.
struct RunStreams {
  RngStream init;
  RngStream shuffle;
  RngStream noise;

  explicit RunStreams(std::uint64_t seed)
      : init(RngStream(seed).substream(0)),
        shuffle(RngStream(seed).substream(1)),
        noise(RngStream(seed).substream(2)) {}
};

using EpochCallback = std::function<void(const MetricsRecord&)>;

// Mini-batch momentum SGD on the cross-entropy loss, evaluating on `test`
// with the configured test-time pooling after every epoch.
[[nodiscard]] inline TrainingResult run_training(const ExperimentConfig& cfg, const Dataset& train,
                                                 const Dataset& test,
                                                 const EpochCallback& on_epoch = {}) {
  validate(cfg);
  ArchSpec arch = resolve_arch(cfg.arch);
  if (arch.n_classes() != train.n_classes) {
    throw GeometryError("architecture has " + std::to_string(arch.n_classes()) +
                        " outputs but the dataset has " + std::to_string(train.n_classes) +
                        " classes");
  }
  const PassConfig pass = pass_config(cfg);
  RunStreams streams(cfg.seed);
  TrainingResult result{{}, Network(std::move(arch))};
  Network& net = result.network;
  net.init(streams.init, cfg.weight_std);
  MomentumSGD<double> opt(cfg.lr, cfg.momentum);
  const auto params = net.parameters();
  const auto start = std::chrono::steady_clock::now();

  for (std::size_t epoch = 1; epoch <= cfg.epoch_count(); ++epoch) {
    BatchIter batches(train, cfg.batch_size, streams.shuffle, cfg.shuffle);
    double loss_sum = 0.0;
    while (auto batch = batches.next()) {
      const Network::Tape tape = net.forward_train(batch->images, pass, streams.noise);
      const LossAndGrad<double> lg = softmax_xent(tape.logits, batch->labels);
      if (!std::isfinite(lg.loss)) {
        throw NumericError("non-finite training loss in epoch " + std::to_string(epoch) +
                           " (lr " + std::to_string(cfg.lr) + ", momentum " +
                           std::to_string(cfg.momentum) + ")");
      }
      loss_sum += lg.loss * static_cast<double>(batch->labels.size());
      const std::vector<Tensor4<double>> grads = net.backward(tape, lg.grad);
      std::vector<ParamGrad<double>> pg;
      pg.reserve(params.size());
      for (std::size_t k = 0; k < params.size(); ++k) pg.push_back({params[k], &grads[k]});
      opt.step(pg);
    }
    MetricsRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train.size() == 0 ? 0.0 : loss_sum / static_cast<double>(train.size());
    rec.test_error_percent = evaluate(net, test, pass);
    rec.wall_seconds =
        cfg.record_wall_time
            ? std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()
            : 0.0;
    result.records.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

// One row of a sweep. `p` is empty for the stochastic-pooling baseline.
struct SweepRow {
  std::optional<double> p;
  TestPoolMode test_mode = TestPoolMode::prob_weighted;
  double test_error_percent = 0.0;

  friend bool operator==(const SweepRow&, const SweepRow&) = default;
};

inline constexpr std::array<TestPoolMode, 3> kDropoutTestModes{
    TestPoolMode::max, TestPoolMode::scaled_max, TestPoolMode::prob_weighted};

using SweepCallback = std::function<void(const SweepRow&)>;

// One max-pooling-dropout model per p, each scored with max, scaled max and
// probabilistic weighted pooling, followed by one stochastic-pooling model
// scored with stochastic weighted pooling. Final-epoch errors.
[[nodiscard]] inline std::vector<SweepRow> sweep(const ExperimentConfig& base,
                                                 std::span<const double> p_values,
                                                 const Dataset& train, const Dataset& test,
                                                 const SweepCallback& on_row = {}) {
  if (p_values.empty()) throw ParameterError("sweep needs at least one retaining probability");
  for (double p : p_values) (void)RetainProb(p);
  std::vector<SweepRow> rows;
  auto emit = [&](SweepRow row) {
    rows.push_back(row);
    if (on_row) on_row(row);
  };
  for (double p : p_values) {
    ExperimentConfig cfg = base;
    cfg.p = p;
    cfg.train_pool = TrainPoolMode::max_dropout;
    cfg.test_pool = TestPoolMode::prob_weighted;
    const TrainingResult run = run_training(cfg, train, test);
    for (TestPoolMode mode : kDropoutTestModes) {
      emit({p, mode, evaluate(run.network, test, mode, p, cfg.fc_dropout_p)});
    }
  }
  ExperimentConfig cfg = base;
  cfg.train_pool = TrainPoolMode::stochastic;
  cfg.test_pool = TestPoolMode::stochastic_weighted;
  const TrainingResult run = run_training(cfg, train, test);
  emit({std::nullopt, TestPoolMode::stochastic_weighted,
        evaluate(run.network, test, pass_config(cfg))});
  return rows;
}

// ---------------------------------------------------------------------------
// CSV

inline constexpr std::string_view kMetricsHeader = "epoch,train_loss,test_error_percent,wall_seconds";
inline constexpr std::string_view kSweepHeader = "p,test_mode,test_error_percent";

namespace detail {

// Shortest representation that parses back to the same double.
inline std::string format_real(double v) {
  std::array<char, 64> buf{};
  const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

inline double parse_real(std::string_view s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw FormatError("malformed number '" + std::string(s) + "' in CSV");
  }
  return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

inline void expect_header(std::istream& in, std::string_view header) {
  std::string line;
  if (!std::getline(in, line) || line != header) {
    throw FormatError("expected CSV header '" + std::string(header) + "'");
  }
}

}  // namespace detail

inline void write_metrics_csv(std::ostream& out, std::span<const MetricsRecord> records) {
  out << kMetricsHeader << '\n';
  for (const auto& r : records) {
    out << r.epoch << ',' << detail::format_real(r.train_loss) << ','
        << detail::format_real(r.test_error_percent) << ',' << detail::format_real(r.wall_seconds)
        << '\n';
  }
}

[[nodiscard]] inline std::vector<MetricsRecord> read_metrics_csv(std::istream& in) {
  detail::expect_header(in, kMetricsHeader);
  std::vector<MetricsRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 4) throw FormatError("metrics CSV row needs 4 fields: '" + line + "'");
    records.push_back({static_cast<std::size_t>(detail::parse_real(f[0])),
                       detail::parse_real(f[1]), detail::parse_real(f[2]),
                       detail::parse_real(f[3])});
  }
  return records;
}

inline void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
  out << kSweepHeader << '\n';
  for (const auto& r : rows) {
    out << (r.p ? detail::format_real(*r.p) : std::string()) << ',' << to_string(r.test_mode)
        << ',' << detail::format_real(r.test_error_percent) << '\n';
  }
}

[[nodiscard]] inline std::vector<SweepRow> read_sweep_csv(std::istream& in) {
  detail::expect_header(in, kSweepHeader);
  std::vector<SweepRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 3) throw FormatError("sweep CSV row needs 3 fields: '" + line + "'");
    SweepRow row;
    if (!f[0].empty()) row.p = detail::parse_real(f[0]);
    row.test_mode = parse_test_pool_mode(f[1]);
    row.test_error_percent = detail::parse_real(f[2]);
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Model-count report

struct ModelCountRow {
  std::size_t pool_layer = 0;  // 1-based among pooling layers
  std::size_t r = 0;           // feature maps
  std::size_t s = 0;           // units per map fed to the pooling layer
  std::size_t t = 0;           // region size
  std::optional<double> base;  // b(t), when the count applies
  std::optional<double> log10_count;
  std::string note;            // reason the count does not apply
};

[[nodiscard]] inline std::vector<ModelCountRow> report_model_count(const ArchSpec& arch) {
  std::vector<ModelCountRow> rows;
  std::size_t pool_layer = 0;
  for (std::size_t i = 1; i < arch.tokens.size(); ++i) {
    const auto* pool = std::get_if<PoolToken>(&arch.tokens[i]);
    if (pool == nullptr) continue;
    const Shape3 in = arch.shapes[i - 1];
    ModelCountRow row;
    row.pool_layer = ++pool_layer;
    row.r = in.c;
    row.s = in.h * in.w;
    row.t = pool->region * pool->region;
    const PoolSpec spec = PoolSpec::square(pool->region, pool->stride);
    if (!spec.non_overlapping()) {
      row.note = "N/A - count assumes non-overlapping pooling";
    } else if (in.h % pool->region != 0 || in.w % pool->region != 0) {
      row.note = "N/A - regions do not tile the feature map";
    } else {
      const ModelCount mc = model_count(row.r, row.s, spec);
      row.base = model_count_base(static_cast<std::int64_t>(row.t));
      row.log10_count = mc.log10;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_model_count_csv(std::ostream& out, std::span<const ModelCountRow> rows) {
  out << "pool_layer,r,s,t,base,log10_count\n";
  for (const auto& row : rows) {
    out << row.pool_layer << ',' << row.r << ',' << row.s << ',' << row.t << ',';
    if (row.log10_count) {
      out << detail::format_real(*row.base) << ',' << detail::format_real(*row.log10_count);
    } else {
      out << "N/A,N/A";
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Parameter files
//
//   bytes 0-7    magic "MPDPARAM"
//   u32          format version (1)
//   u32          architecture string length L, then L bytes
//   u32          tensor count K
//   K times:     4 x u64 shape (n, c, h, w), then n*c*h*w f64 values
// All integers and floats little-endian.

inline constexpr std::array<char, 8> kParamMagic{'M', 'P', 'D', 'P', 'A', 'R', 'A', 'M'};
inline constexpr std::uint32_t kParamVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "parameter files are written with native little-endian stores");

template <typename U>
void write_pod(std::ostream& out, U value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(U));
}

template <typename U>
U read_pod(std::istream& in, const char* what) {
  U value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(U))) {
    throw FormatError(std::string("parameter file truncated while reading ") + what);
  }
  return value;
}

}  // namespace detail

inline void save_network(std::ostream& out, const Network& net) {
  out.write(kParamMagic.data(), kParamMagic.size());
  detail::write_pod<std::uint32_t>(out, kParamVersion);
  const std::string& arch = net.arch().source;
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(arch.size()));
  out.write(arch.data(), static_cast<std::streamsize>(arch.size()));
  const auto params = net.parameters();
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto* t : params) {
    const Shape4& s = t->shape();
    for (std::uint64_t d : {s.n, s.c, s.h, s.w}) detail::write_pod<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t->data().data()),
              static_cast<std::streamsize>(t->size() * sizeof(double)));
  }
  if (!out) throw FormatError("failed writing parameter file");
}

[[nodiscard]] inline Network load_network(std::istream& in) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kParamMagic) {
    throw FormatError("not a parameter file (bad magic)");
  }
  const auto version = detail::read_pod<std::uint32_t>(in, "version");
  if (version != kParamVersion) {
    throw FormatError("unsupported parameter file version " + std::to_string(version));
  }
  const auto arch_len = detail::read_pod<std::uint32_t>(in, "architecture length");
  std::string arch(arch_len, '\0');
  if (!in.read(arch.data(), arch_len)) throw FormatError("parameter file truncated in architecture");
  Network net(parse_arch(arch));
  const auto params = net.parameters();
  const auto count = detail::read_pod<std::uint32_t>(in, "tensor count");
  if (count != params.size()) {
    throw FormatError("parameter file holds " + std::to_string(count) + " tensors, architecture needs " +
                      std::to_string(params.size()));
  }
  for (auto* t : params) {
    Shape4 s;
    s.n = detail::read_pod<std::uint64_t>(in, "shape");
    s.c = detail::read_pod<std::uint64_t>(in, "shape");
    s.h = detail::read_pod<std::uint64_t>(in, "shape");
    s.w = detail::read_pod<std::uint64_t>(in, "shape");
    if (s != t->shape()) {
      throw FormatError("parameter tensor shape " + s.str() + " does not match " + t->shape().str());
    }
    if (!in.read(reinterpret_cast<char*>(t->data().data()),
                 static_cast<std::streamsize>(t->size() * sizeof(double)))) {
      throw FormatError("parameter file truncated in tensor data");
    }
  }
  return net;
}

inline void save_network(const std::filesystem::path& path, const Network& net) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  save_network(out, net);
}

[[nodiscard]] inline Network load_network(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return load_network(in);
}

}  // namespace mpd
