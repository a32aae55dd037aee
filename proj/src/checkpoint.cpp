#include "driftlm/checkpoint.hpp"

#include <fstream>
#include <json.hpp>

#include "driftlm/errors.hpp"

namespace driftlm {

using nlohmann::json;

namespace {

constexpr const char* format_tag = "driftlm-checkpoint";

json tensors_to_json(const DenoiserParams& p) {
    json out = json::object();
    for (const auto& [name, t] : p.named_tensors()) {
        out[name] = {{"shape", t->shape()}, {"values", std::vector<double>(t->values().begin(), t->values().end())}};
    }
    return out;
}

DenoiserParams tensors_from_json(const json& j, const ModelDims& dims) {
    DenoiserParams p = DenoiserParams::zeros(dims);
    for (auto& [name, t] : p.named_tensors()) {
        if (!j.contains(name)) throw ParseError("checkpoint: missing tensor '" + name + "'");
        const json& entry = j.at(name);
        auto shape = entry.at("shape").get<Shape>();
        auto values = entry.at("values").get<std::vector<double>>();
        if (shape != t->shape()) throw ParseError("checkpoint: tensor '" + name + "' has unexpected shape");
        try {
            *t = Tensor(std::move(shape), std::move(values));
        } catch (const std::exception& e) {
            throw ParseError("checkpoint: tensor '" + name + "': " + e.what());
        }
    }
    return p;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const ModelDims& d = ckpt.params.dims;
    json doc = {
        {"format", format_tag},
        {"version", checkpoint_version},
        {"dims", {{"vocab", d.vocab}, {"seq_len", d.seq_len}, {"d_model", d.d_model}, {"d_hidden", d.d_hidden}}},
        {"step", ckpt.step},
        {"params", tensors_to_json(ckpt.params)},
    };
    if (ckpt.moments) {
        doc["adam"] = {{"first", tensors_to_json(ckpt.moments->first)},
                       {"second", tensors_to_json(ckpt.moments->second)}};
    }
    // Write-then-rename keeps the previous checkpoint intact if writing fails.
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp);
        if (!out) throw IoError("cannot write checkpoint " + tmp.string());
        out << doc.dump();
        if (!out) throw IoError("failed writing checkpoint " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError("checkpoint " + path.string() + ": " + e.what());
    }
    try {
        if (doc.value("format", std::string{}) != format_tag) {
            throw ParseError("checkpoint " + path.string() + ": not a driftlm checkpoint");
        }
        const int version = doc.at("version").get<int>();
        if (version != checkpoint_version) {
            throw VersionMismatch("checkpoint " + path.string() + ": version " + std::to_string(version) +
                                  ", this build reads version " + std::to_string(checkpoint_version));
        }
        const json& jd = doc.at("dims");
        ModelDims dims{jd.at("vocab").get<int>(), jd.at("seq_len").get<int>(), jd.at("d_model").get<int>(),
                       jd.at("d_hidden").get<int>()};
        Checkpoint ckpt;
        ckpt.params = tensors_from_json(doc.at("params"), dims);
        ckpt.step = doc.value("step", std::int64_t{0});
        if (doc.contains("adam")) {
            ckpt.moments = AdamMoments{tensors_from_json(doc["adam"].at("first"), dims),
                                       tensors_from_json(doc["adam"].at("second"), dims)};
        }
        return ckpt;
    } catch (const json::exception& e) {
        throw ParseError("checkpoint " + path.string() + ": " + e.what());
    }
}

}  // namespace driftlm
