// backfire: command-line front end for data generation, poisoning,
// experiment runs, sweeps and the scalar oracle.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime/training error.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "backfire/backfire.hpp"

namespace {

using namespace backfire;

constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ','))
        if (!item.empty())
            out.push_back(item);
    return out;
}

nn::Dims parse_dims(const std::vector<int>& d) {
    if (d.size() != 3)
        throw ConfigError("--dims takes three values: length width channels");
    return {d[0], d[1], d[2]};
}

int gen_data(int classes, int per_class, const std::vector<int>& dims, std::uint64_t seed, const std::string& out) {
    data::SbdFile file;
    file.num_classes = classes;
    file.dims = parse_dims(dims);
    file.examples = data::generate_synthetic(classes, per_class, file.dims, seed);
    data::write_sbd(out, file);
    std::cout << "wrote " << file.examples.size() << " examples to " << out << "\n";
    return 0;
}

int poison(const std::string& in, const std::string& out, int attacker, double eps, double rate) {
    auto file = data::read_sbd(in);
    const auto cfg = attack::make_attacker(attacker, eps, rate, file.num_classes);
    const auto trigger = attack::generate_trigger(cfg, file.dims);
    data::AgentDataset d{attacker, std::move(file.examples), {}};
    d = attack::poison_dataset(std::move(d), cfg, trigger, false);
    file.examples = std::move(d.train_examples);
    data::write_sbd(out, file);
    std::cout << "attacker " << attacker << " target " << cfg.target_label << ": poisoned "
              << attack::poison_count(rate, file.examples.size()) << " of " << file.examples.size() << " examples\n";
    return 0;
}

int run_one(const std::string& config_path, const std::string& output_dir) {
    auto cfg = experiment::load_config(config_path);
    if (!output_dir.empty())
        cfg.output_dir = output_dir;
    const auto rec = experiment::run(cfg, experiment::threads_from_env());
    std::cout << experiment::metrics_document(cfg, rec);
    return 0;
}

int run_sweep(const std::string& config_path, const std::string& axis_name, const std::string& values,
              const std::string& output_dir) {
    auto base = experiment::load_config(config_path);
    if (!output_dir.empty())
        base.output_dir = output_dir;
    const auto axis = experiment::parse_axis(axis_name);
    const auto list = split_list(values);
    if (list.empty())
        return 0;
    const auto entries = experiment::sweep(base, axis, list, experiment::threads_from_env());
    const auto table = experiment::sweep_csv(base, axis, entries);
    if (!base.output_dir.empty())
        io::write_file_atomic(std::filesystem::path(base.output_dir) / "sweep.csv", table);
    std::cout << table;
    int code = 0;
    for (const auto& e : entries) {
        if (e.record)
            continue;
        std::cerr << "run '" << e.value << "' failed: " << e.error << "\n";
        code = std::max(code, e.config_error ? kConfigError : kRuntimeError);
    }
    return code;
}

int run_oracle(int instances, std::uint64_t seed, const std::string& grid, double margin, const std::string& out) {
    oracle::SweepConfig cfg;
    cfg.num_instances = instances;
    cfg.seed = seed;
    cfg.rejection_margin = margin;
    if (!grid.empty()) {
        cfg.alpha_grid.clear();
        for (const auto& v : split_list(grid)) {
            try {
                cfg.alpha_grid.push_back(std::stod(v));
            } catch (const std::exception&) {
                throw ConfigError("--alpha-grid: not a number: " + v);
            }
        }
    }
    const auto summary = oracle::theorem1_sweep(cfg);
    const auto doc = oracle::to_json(summary, cfg).dump(2) + "\n";
    if (!out.empty()) {
        io::write_file_atomic(std::filesystem::path(out) / "oracle_summary.json", doc);
        io::write_file_atomic(std::filesystem::path(out) / "oracle_losses.csv", oracle::rows_csv(summary));
    }
    std::cout << doc;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-agent backdoor game simulator"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset as an SBD1 file");
    int classes = 10, per_class = 200;
    std::vector<int> dims{16, 16, 1};
    std::uint64_t seed = 3407;
    std::string out;
    gen->add_option("--classes", classes, "Number of classes")->capture_default_str();
    gen->add_option("--per-class", per_class, "Examples per class")->capture_default_str();
    gen->add_option("--dims", dims, "length width channels")->expected(3)->capture_default_str();
    gen->add_option("--seed", seed, "Generator seed")->capture_default_str();
    gen->add_option("--out", out, "Output file")->required();

    auto* poi = app.add_subcommand("poison", "Apply one attacker's trigger to an SBD1 file");
    std::string in;
    int attacker = 1;
    double eps = 0.4, rate = 0.4;
    poi->add_option("--in", in, "Input SBD1 file")->required();
    poi->add_option("--out", out, "Output SBD1 file")->required();
    poi->add_option("--attacker", attacker, "Attacker index (also its seed)")->capture_default_str();
    poi->add_option("--epsilon", eps, "Trigger pixel rate")->capture_default_str();
    poi->add_option("--poison-rate", rate, "Fraction of examples to poison")->capture_default_str();

    auto* run = app.add_subcommand("run", "Run one experiment from a JSON config");
    std::string config, output_dir;
    run->add_option("--config", config, "Config file")->required();
    run->add_option("--output-dir", output_dir, "Override output_dir from the config");

    auto* swp = app.add_subcommand("sweep", "Run one experiment per axis value");
    std::string axis, values;
    swp->add_option("--config", config, "Base config file")->required();
    swp->add_option("--axis", axis, "N, p_epsilon or defense")->required();
    // Zero or one token, so an empty list does not swallow the next flag.
    swp->add_option("--values", values, "Comma-separated values")->required()->expected(0, 1);
    swp->add_option("--output-dir", output_dir, "Override output_dir from the config");

    auto* ora = app.add_subcommand("oracle", "Scalar interpolation oracle sweep");
    int instances = 1000;
    std::string grid;
    double margin = 5.0;
    ora->add_option("--instances", instances, "Accepted instances to sample")->capture_default_str();
    ora->add_option("--seed", seed, "Sweep seed")->capture_default_str();
    ora->add_option("--alpha-grid", grid, "Comma-separated alpha values (default 0,0.1,...,1)");
    ora->add_option("--margin", margin, "Rejected-target margin")->capture_default_str();
    ora->add_option("--out", out, "Directory for oracle_summary.json and oracle_losses.csv");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kConfigError;
    }

    try {
        if (*gen)
            return gen_data(classes, per_class, dims, seed, out);
        if (*poi)
            return poison(in, out, attacker, eps, rate);
        if (*run)
            return run_one(config, output_dir);
        if (*swp)
            return run_sweep(config, axis, values, output_dir);
        if (*ora)
            return run_oracle(instances, seed, grid, margin, out);
    } catch (const experiment::StageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.config_error() ? kConfigError : kRuntimeError;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntimeError;
    }
    return 0;
}
