// mpdrop: train, sweep and model-count front end.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mpdrop/mpdrop.hpp"

namespace {

namespace fs = std::filesystem;

struct Options {
  std::string dataset = "mnist";
  std::string data_dir;
  std::string arch;
  std::string train_pool = "max_dropout";
  std::string test_pool;
  double p = 0.5;
  std::string fc_dropout = "off";
  std::optional<std::size_t> epochs;
  std::size_t batch_size = 100;
  double lr = 0.1;
  double momentum = 0.95;
  std::uint64_t seed = 1;
  std::string out;
  std::string model_out;
  std::size_t limit_train = 0;
  std::size_t limit_test = 0;
  bool no_wall_time = false;
  bool allow_cross_pairing = false;
  std::vector<double> p_grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
};

void add_data_flags(CLI::App* cmd, Options& o) {
  cmd->add_option("--dataset", o.dataset, "mnist, cifar10 or cifar100")
      ->check(CLI::IsMember({"mnist", "cifar10", "cifar100"}))
      ->capture_default_str();
  cmd->add_option("--arch", o.arch, "preset name or architecture string (default: dataset preset)");
}

void add_training_flags(CLI::App* cmd, Options& o) {
  add_data_flags(cmd, o);
  cmd->add_option("--data-dir", o.data_dir, "directory holding the dataset files")->required();
  cmd->add_option("--fc-dropout", o.fc_dropout, "retain probability for dense-layer inputs, or off")
      ->capture_default_str();
  cmd->add_option("--epochs", o.epochs, "epochs (default 10 for mnist, 15 for cifar)");
  cmd->add_option("--batch-size", o.batch_size)->capture_default_str();
  cmd->add_option("--lr", o.lr)->capture_default_str();
  cmd->add_option("--momentum", o.momentum)->capture_default_str();
  cmd->add_option("--seed", o.seed)->capture_default_str();
  cmd->add_option("--out", o.out, "CSV output path");
  cmd->add_option("--limit-train", o.limit_train, "use only the first N training examples");
  cmd->add_option("--limit-test", o.limit_test, "use only the first N test examples");
  cmd->add_flag("--no-wall-time", o.no_wall_time, "write 0 in the wall_seconds column");
}

std::optional<double> parse_fc_dropout(const std::string& text) {
  if (text == "off") return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw mpd::ParameterError("--fc-dropout expects a probability or 'off', got '" + text + "'");
}

mpd::ExperimentConfig make_config(const Options& o) {
  mpd::ExperimentConfig cfg;
  cfg.dataset = mpd::parse_dataset_kind(o.dataset);
  cfg.data_dir = o.data_dir;
  cfg.arch = o.arch.empty() ? o.dataset : o.arch;
  cfg.train_pool = mpd::parse_train_pool_mode(o.train_pool);
  if (!o.test_pool.empty()) {
    cfg.test_pool = mpd::parse_test_pool_mode(o.test_pool);
  } else {
    cfg.test_pool = cfg.train_pool == mpd::TrainPoolMode::stochastic
                        ? mpd::TestPoolMode::stochastic_weighted
                        : mpd::TestPoolMode::prob_weighted;
  }
  cfg.p = o.p;
  cfg.fc_dropout_p = parse_fc_dropout(o.fc_dropout);
  cfg.epochs = o.epochs;
  cfg.batch_size = o.batch_size;
  cfg.lr = o.lr;
  cfg.momentum = o.momentum;
  cfg.seed = o.seed;
  cfg.train_limit = o.limit_train;
  cfg.test_limit = o.limit_test;
  cfg.record_wall_time = !o.no_wall_time;
  cfg.allow_cross_pairing = o.allow_cross_pairing;
  mpd::validate(cfg);
  return cfg;
}

// Opened before any training so a bad path fails immediately.
std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw mpd::FormatError("cannot open " + path + " for writing");
  return out;
}

std::string fmt(double v, int digits = 2) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

int run_train(const Options& o) {
  const mpd::ExperimentConfig cfg = make_config(o);
  const mpd::ArchSpec arch = mpd::resolve_arch(cfg.arch);
  std::optional<std::ofstream> csv;
  if (!o.out.empty()) csv = open_output(o.out);
  std::cout << "arch " << arch.shape_chain() << "\n"
            << "train " << mpd::to_string(cfg.train_pool) << ", test "
            << mpd::to_string(cfg.test_pool) << ", p " << cfg.p << ", fc dropout "
            << (cfg.fc_dropout_p ? std::to_string(*cfg.fc_dropout_p) : std::string("off")) << "\n";
  const mpd::DataSplits data = mpd::load_datasets(cfg);
  std::cout << "data " << data.train.size() << " train / " << data.test.size() << " test\n"
            << std::flush;

  std::vector<mpd::MetricsRecord> records;
  const mpd::TrainingResult result =
      mpd::run_training(cfg, data.train, data.test, [&](const mpd::MetricsRecord& r) {
        records.push_back(r);
        std::cout << "epoch " << r.epoch << "  loss " << fmt(r.train_loss, 5) << "  test error "
                  << fmt(r.test_error_percent) << "%  " << fmt(r.wall_seconds, 1) << "s\n"
                  << std::flush;
        if (csv) {
          csv->seekp(0);
          mpd::write_metrics_csv(*csv, records);
          csv->flush();
        }
      });
  std::cout << "final test error " << fmt(result.final_error()) << "%, best "
            << fmt(result.best_error()) << "%\n";
  if (!o.model_out.empty()) mpd::save_network(fs::path(o.model_out), result.network);
  return 0;
}

int run_sweep(const Options& o) {
  const mpd::ExperimentConfig cfg = make_config(o);
  if (o.out.empty()) throw mpd::ParameterError("sweep needs --out");
  std::ofstream csv = open_output(o.out);
  const mpd::DataSplits data = mpd::load_datasets(cfg);
  std::vector<mpd::SweepRow> rows;
  const auto all = mpd::sweep(cfg, o.p_grid, data.train, data.test, [&](const mpd::SweepRow& row) {
    rows.push_back(row);
    std::cout << "p " << (row.p ? fmt(*row.p, 2) : std::string("-   ")) << "  "
              << mpd::to_string(row.test_mode) << "  " << fmt(row.test_error_percent) << "%\n"
              << std::flush;
    csv.seekp(0);
    mpd::write_sweep_csv(csv, rows);
    csv.flush();
  });
  (void)all;
  return 0;
}

int run_model_count(const Options& o) {
  const mpd::ArchSpec arch = mpd::resolve_arch(o.arch.empty() ? o.dataset : o.arch);
  const auto rows = mpd::report_model_count(arch);
  std::cout << "arch " << arch.shape_chain() << "\n";
  for (const auto& row : rows) {
    std::cout << "pool layer " << row.pool_layer << ": r=" << row.r << " s=" << row.s
              << " t=" << row.t << "  ";
    if (row.log10_count) {
      std::cout << "base " << fmt(*row.base, 6) << "  count 10^" << fmt(*row.log10_count) << "\n";
    } else {
      std::cout << row.note << "\n";
    }
  }
  if (!o.out.empty()) {
    std::ofstream csv = open_output(o.out);
    mpd::write_model_count_csv(csv, rows);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Max-pooling dropout experiments"};
  app.require_subcommand(1);
  Options o;

  CLI::App* train = app.add_subcommand("train", "train one network and record per-epoch metrics");
  add_training_flags(train, o);
  train->add_option("--train-pool", o.train_pool, "max, max_dropout or stochastic")
      ->capture_default_str();
  train->add_option("--test-pool", o.test_pool,
                    "max, scaled_max, prob_weighted or stochastic_weighted");
  train->add_option("--p", o.p, "pooling retain probability")->capture_default_str();
  train->add_option("--model-out", o.model_out, "write trained parameters here");
  train->add_flag("--allow-cross-pairing", o.allow_cross_pairing,
                  "allow stochastic / dropout pooling to be mixed across train and test");

  CLI::App* sweep = app.add_subcommand(
      "sweep", "train one model per p and a stochastic-pooling baseline, score every test mode");
  add_training_flags(sweep, o);
  sweep->add_option("--p-grid", o.p_grid, "retain probabilities to train with")
      ->delimiter(',')
      ->capture_default_str();

  CLI::App* count = app.add_subcommand("model-count", "count pooling-dropout models per layer");
  add_data_flags(count, o);
  count->add_option("--out", o.out, "CSV output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "mpdrop: error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*train) return run_train(o);
    if (*sweep) return run_sweep(o);
    return run_model_count(o);
  } catch (const std::exception& e) {
    std::cerr << "mpdrop: error: " << e.what() << "\n";
    return 1;
  }
}
