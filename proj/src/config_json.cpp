#include "driftlm/config_json.hpp"

#include <set>

#include "driftlm/errors.hpp"

namespace driftlm {

using ojson = nlohmann::ordered_json;

ojson to_json(const TrainConfig& c) {
    ojson doc;
    doc["batch_size"] = c.batch_size;
    doc["micro_batch"] = c.micro_batch;
    doc["steps"] = c.steps;
    doc["lr"] = c.lr;
    doc["adam_beta1"] = c.adam_beta1;
    doc["adam_beta2"] = c.adam_beta2;
    doc["adam_eps"] = c.adam_eps;
    doc["seed"] = c.seed;
    doc["objective"] = {{"variant", to_string(c.objective.variant)},
                        {"with_base_loss", c.objective.with_base_loss},
                        {"lift", to_string(c.objective.lift)},
                        {"eta", c.objective.eta},
                        {"alpha", c.objective.alpha}};
    doc["drift"] = {{"temperatures", c.drift.temperatures},
                    {"eps", c.drift.eps},
                    {"w_plus", c.drift.w_plus},
                    {"w_minus", c.drift.w_minus},
                    {"renormalize_sides", c.drift.renormalize_sides}};
    doc["corruption"] = to_string(c.corruption);
    doc["eval_every"] = c.eval_every;
    doc["queue_capacity"] = c.queue_capacity;
    doc["t_min"] = c.t_min;
    doc["t_max"] = c.t_max;
    doc["eval"] = {{"nfes", c.eval.nfes}, {"n_samples", c.eval.n_samples}, {"seed", c.eval.seed}};
    doc["resume_optimizer"] = c.resume_optimizer;
    return doc;
}

namespace {

void check_keys(const nlohmann::json& obj, const std::set<std::string>& allowed, const std::string& where) {
    if (!obj.is_object()) throw InvalidInput("config: '" + where + "' must be an object");
    for (const auto& [key, value] : obj.items()) {
        if (!allowed.count(key)) throw InvalidInput("config: unknown key '" + where + key + "'");
    }
}

template <class T>
void read(const nlohmann::json& obj, const char* key, T& dst) {
    if (obj.contains(key)) dst = obj.at(key).get<T>();
}

}  // namespace

TrainConfig train_config_from_json(const nlohmann::json& doc, const TrainConfig& defaults) {
    TrainConfig c = defaults;
    try {
        check_keys(doc,
                   {"batch_size", "micro_batch", "steps", "lr", "adam_beta1", "adam_beta2", "adam_eps", "seed",
                    "objective", "drift", "corruption", "eval_every", "queue_capacity", "t_min", "t_max", "eval",
                    "resume_optimizer"},
                   "");
        read(doc, "batch_size", c.batch_size);
        read(doc, "micro_batch", c.micro_batch);
        read(doc, "steps", c.steps);
        read(doc, "lr", c.lr);
        read(doc, "adam_beta1", c.adam_beta1);
        read(doc, "adam_beta2", c.adam_beta2);
        read(doc, "adam_eps", c.adam_eps);
        read(doc, "seed", c.seed);
        read(doc, "eval_every", c.eval_every);
        read(doc, "queue_capacity", c.queue_capacity);
        read(doc, "t_min", c.t_min);
        read(doc, "t_max", c.t_max);
        read(doc, "resume_optimizer", c.resume_optimizer);
        if (doc.contains("corruption")) c.corruption = parse_corruption_kind(doc.at("corruption").get<std::string>());
        if (doc.contains("objective")) {
            const auto& o = doc.at("objective");
            check_keys(o, {"variant", "with_base_loss", "lift", "eta", "alpha"}, "objective.");
            if (o.contains("variant")) c.objective.variant = parse_objective_variant(o.at("variant").get<std::string>());
            if (o.contains("lift")) c.objective.lift = parse_lift_kind(o.at("lift").get<std::string>());
            read(o, "with_base_loss", c.objective.with_base_loss);
            read(o, "eta", c.objective.eta);
            read(o, "alpha", c.objective.alpha);
        }
        c.drift.alpha = c.objective.alpha;
        if (doc.contains("drift")) {
            const auto& d = doc.at("drift");
            check_keys(d, {"temperatures", "eps", "w_plus", "w_minus", "renormalize_sides"}, "drift.");
            read(d, "temperatures", c.drift.temperatures);
            read(d, "eps", c.drift.eps);
            read(d, "w_plus", c.drift.w_plus);
            read(d, "w_minus", c.drift.w_minus);
            read(d, "renormalize_sides", c.drift.renormalize_sides);
        }
        if (doc.contains("eval")) {
            const auto& e = doc.at("eval");
            check_keys(e, {"nfes", "n_samples", "seed"}, "eval.");
            read(e, "nfes", c.eval.nfes);
            read(e, "n_samples", c.eval.n_samples);
            read(e, "seed", c.eval.seed);
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("config: ") + e.what());
    }
    return c;
}

}  // namespace driftlm
