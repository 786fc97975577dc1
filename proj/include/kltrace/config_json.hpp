#pragma once

// JSON mappings for configuration structs. Unknown keys are rejected so a
// typo in a config file or --set override fails loudly.

#include <json.hpp>

#include "kltrace/seqmodel.hpp"
#include "kltrace/synth.hpp"

namespace kltrace {

using json = nlohmann::json;

namespace seq {
void to_json(json& j, const ModelConfig& c);
void from_json(const json& j, ModelConfig& c);
void to_json(json& j, const TrainOptions& o);
void from_json(const json& j, TrainOptions& o);
void to_json(json& j, const SamplingOptions& o);
void from_json(const json& j, SamplingOptions& o);
}  // namespace seq

namespace synth {
void to_json(json& j, const SceneOptions& o);
void from_json(const json& j, SceneOptions& o);
void to_json(json& j, const DatasetConfig& c);
void from_json(const json& j, DatasetConfig& c);
}  // namespace synth

/// Throws Error(config) naming the first key of `j` not in `allowed`.
void reject_unknown_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view where);

/// Reads `key` into `out` when present; wraps type errors as Error(config).
template <class T>
void read_opt(const json& j, const char* key, T& out, std::string_view where) {
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
        out = it->template get<T>();
    } catch (const json::exception& e) {
        throw Error(ErrorKind::config, std::string(where) + "." + key + ": " + e.what());
    }
}

}  // namespace kltrace
