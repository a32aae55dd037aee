#include "driftlm/ablation.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "driftlm/errors.hpp"

namespace driftlm {

std::string to_string(AblationAxis axis) {
    switch (axis) {
        case AblationAxis::Lift: return "lift";
        case AblationAxis::Objective: return "objective";
        case AblationAxis::QueueSize: return "queue_size";
        case AblationAxis::AttRepRatio: return "att_rep_ratio";
        case AblationAxis::TemperatureSet: return "temperature_set";
        case AblationAxis::Eta: return "eta";
    }
    return "?";
}

AblationAxis parse_ablation_axis(const std::string& text) {
    for (auto a : {AblationAxis::Lift, AblationAxis::Objective, AblationAxis::QueueSize, AblationAxis::AttRepRatio,
                   AblationAxis::TemperatureSet, AblationAxis::Eta}) {
        if (to_string(a) == text) return a;
    }
    throw InvalidInput("unknown ablation axis '" + text +
                       "' (expected lift, objective, queue_size, att_rep_ratio, temperature_set or eta)");
}

namespace {

double parse_real(const std::string& text, const std::string& what) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(text, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != text.size()) throw InvalidInput("ablation: bad " + what + " '" + text + "'");
    return v;
}

std::vector<std::string> split(const std::string& text, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(text);
    while (std::getline(in, cur, sep)) out.push_back(cur);
    return out;
}

std::string slug(const std::string& value) {
    std::string out;
    for (char c : value) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-') ? c : '_';
    return out;
}

}  // namespace

TrainConfig apply_axis_value(const TrainConfig& base, AblationAxis axis, const std::string& value) {
    TrainConfig c = base;
    switch (axis) {
        case AblationAxis::Lift: c.objective.lift = parse_lift_kind(value); break;
        case AblationAxis::Objective: {
            const std::string suffix = "+base";
            std::string name = value;
            c.objective.with_base_loss = false;
            if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
                name.resize(name.size() - suffix.size());
                c.objective.with_base_loss = true;
            }
            c.objective.variant = parse_objective_variant(name);
            break;
        }
        case AblationAxis::QueueSize: {
            const double q = parse_real(value, "queue size");
            if (!(q >= 1.0) || q != std::floor(q)) throw InvalidInput("ablation: queue size must be a positive integer");
            c.queue_capacity = static_cast<std::size_t>(q);
            break;
        }
        case AblationAxis::AttRepRatio: {
            const auto parts = split(value, ':');
            if (parts.size() != 2) throw InvalidInput("ablation: ratio must look like w_plus:w_minus, got '" + value + "'");
            c.drift.w_plus = parse_real(parts[0], "ratio weight");
            c.drift.w_minus = parse_real(parts[1], "ratio weight");
            break;
        }
        case AblationAxis::TemperatureSet: {
            c.drift.temperatures.clear();
            for (const auto& p : split(value, '/')) c.drift.temperatures.push_back(parse_real(p, "temperature"));
            break;
        }
        case AblationAxis::Eta: c.objective.eta = parse_real(value, "eta"); break;
    }
    c.validate();
    return c;
}

std::pair<double, double> mean_sd(const std::vector<double>& xs) {
    if (xs.empty()) throw InvalidInput("mean_sd: no values");
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    if (xs.size() == 1) return {mean, 0.0};
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

std::string AblationTable::to_csv() const {
    auto fmt = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.10g", v);
        return std::string(buf);
    };
    std::string out = to_string(axis);
    for (int n : nfes) {
        const std::string s = std::to_string(n);
        out += ",gen_ppl_nfe" + s + "_mean,gen_ppl_nfe" + s + "_sd,entropy_nfe" + s + "_mean,entropy_nfe" + s + "_sd";
    }
    out += "\n";
    for (const auto& r : rows) {
        out += r.value;
        for (std::size_t k = 0; k < nfes.size(); ++k) {
            out += "," + fmt(r.gen_ppl_mean[k]) + "," + fmt(r.gen_ppl_sd[k]) + "," + fmt(r.entropy_mean[k]) + "," +
                   fmt(r.entropy_sd[k]);
        }
        out += "\n";
    }
    return out;
}

AblationTable ablate(AblationAxis axis, const std::vector<std::string>& grid, const TrainConfig& base_config,
                     const std::vector<std::uint64_t>& seeds, const MarkovSource& source, const Checkpoint& init,
                     const std::optional<std::filesystem::path>& out_dir) {
    if (grid.empty()) throw InvalidInput("ablate: empty grid");
    if (seeds.empty()) throw InvalidInput("ablate: no seeds");
    std::vector<TrainConfig> configs;
    for (const auto& v : grid) configs.push_back(apply_axis_value(base_config, axis, v));

    AblationTable table;
    table.axis = axis;
    table.nfes = base_config.eval.nfes;
    for (std::size_t g = 0; g < grid.size(); ++g) {
        std::vector<std::vector<double>> ppl(table.nfes.size()), ent(table.nfes.size());
        for (std::uint64_t seed : seeds) {
            TrainConfig c = configs[g];
            c.seed = seed;
            c.eval.seed = seed;
            std::optional<std::filesystem::path> cell_dir;
            if (out_dir) cell_dir = *out_dir / slug(grid[g]) / ("seed_" + std::to_string(seed));
            RunResult run = train_run(c, source, init, cell_dir);
            for (std::size_t k = 0; k < table.nfes.size(); ++k) {
                ppl[k].push_back(run.final_report.at(table.nfes[k]).gen_ppl);
                ent[k].push_back(run.final_report.at(table.nfes[k]).entropy);
            }
            table.cells.push_back({grid[g], seed, std::move(run.final_report)});
        }
        AblationRow row;
        row.value = grid[g];
        for (std::size_t k = 0; k < table.nfes.size(); ++k) {
            auto [pm, ps] = mean_sd(ppl[k]);
            auto [em, es] = mean_sd(ent[k]);
            row.gen_ppl_mean.push_back(pm);
            row.gen_ppl_sd.push_back(ps);
            row.entropy_mean.push_back(em);
            row.entropy_sd.push_back(es);
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

}  // namespace driftlm
