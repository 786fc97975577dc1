#include "kltrace/config_json.hpp"

#include <string>

namespace kltrace {

void reject_unknown_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
    if (!j.is_object()) throw Error(ErrorKind::config, std::string(where) + ": expected an object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (auto a : allowed) ok = ok || key == a;
        if (!ok) throw Error(ErrorKind::config, std::string(where) + ": unknown key '" + key + "'");
    }
}

namespace seq {

void to_json(json& j, const ModelConfig& c) {
    j = json{{"layers", c.layers},
             {"model_dim", c.model_dim},
             {"heads", c.heads},
             {"mlp_dim", c.mlp_dim},
             {"K", c.K},
             {"gh", c.gh},
             {"gw", c.gw},
             {"patch_dim", c.patch_dim},
             {"variant", std::string(variant_name(c.variant))},
             {"rope_pairs", c.rope_pairs},
             {"value_rotary_heads", c.value_rotary_heads},
             {"final_norm", c.final_norm},
             {"rng_seed", c.rng_seed}};
}

void from_json(const json& j, ModelConfig& c) {
    constexpr std::string_view w = "model";
    reject_unknown_keys(j,
                        {"layers", "model_dim", "heads", "mlp_dim", "K", "gh", "gw", "patch_dim", "variant",
                         "rope_pairs", "value_rotary_heads", "final_norm", "rng_seed"},
                        w);
    read_opt(j, "layers", c.layers, w);
    read_opt(j, "model_dim", c.model_dim, w);
    read_opt(j, "heads", c.heads, w);
    read_opt(j, "mlp_dim", c.mlp_dim, w);
    read_opt(j, "K", c.K, w);
    read_opt(j, "gh", c.gh, w);
    read_opt(j, "gw", c.gw, w);
    read_opt(j, "patch_dim", c.patch_dim, w);
    std::string v(variant_name(c.variant));
    read_opt(j, "variant", v, w);
    c.variant = parse_variant(v);
    read_opt(j, "rope_pairs", c.rope_pairs, w);
    read_opt(j, "value_rotary_heads", c.value_rotary_heads, w);
    read_opt(j, "final_norm", c.final_norm, w);
    read_opt(j, "rng_seed", c.rng_seed, w);
}

void to_json(json& j, const TrainOptions& o) {
    j = json{{"steps", o.steps},         {"batch", o.batch},
             {"lr", o.lr},               {"warmup", o.warmup},
             {"clip", o.clip},           {"beta1", o.beta1},
             {"beta2", o.beta2},         {"eps", o.eps},
             {"reveal_max", o.reveal_max}, {"seed", o.seed},
             {"log_every", o.log_every}, {"eval_every", o.eval_every},
             {"eval_examples", o.eval_examples}};
}

void from_json(const json& j, TrainOptions& o) {
    constexpr std::string_view w = "train";
    reject_unknown_keys(j,
                        {"steps", "batch", "lr", "warmup", "clip", "beta1", "beta2", "eps", "reveal_max", "seed",
                         "log_every", "eval_every", "eval_examples"},
                        w);
    read_opt(j, "steps", o.steps, w);
    read_opt(j, "batch", o.batch, w);
    read_opt(j, "lr", o.lr, w);
    read_opt(j, "warmup", o.warmup, w);
    read_opt(j, "clip", o.clip, w);
    read_opt(j, "beta1", o.beta1, w);
    read_opt(j, "beta2", o.beta2, w);
    read_opt(j, "eps", o.eps, w);
    read_opt(j, "reveal_max", o.reveal_max, w);
    read_opt(j, "seed", o.seed, w);
    read_opt(j, "log_every", o.log_every, w);
    read_opt(j, "eval_every", o.eval_every, w);
    read_opt(j, "eval_examples", o.eval_examples, w);
}

void to_json(json& j, const SamplingOptions& o) {
    j = json{{"temperature", o.temperature}, {"top_k", o.top_k}, {"parallel", o.parallel}};
}

void from_json(const json& j, SamplingOptions& o) {
    constexpr std::string_view w = "sampling";
    reject_unknown_keys(j, {"temperature", "top_k", "parallel"}, w);
    read_opt(j, "temperature", o.temperature, w);
    read_opt(j, "top_k", o.top_k, w);
    read_opt(j, "parallel", o.parallel, w);
}

}  // namespace seq

namespace synth {

void to_json(json& j, const SceneOptions& o) {
    j = json{{"width", o.width},
             {"height", o.height},
             {"num_frames", o.num_frames},
             {"max_displacement", o.max_displacement},
             {"min_sprite", o.min_sprite},
             {"max_sprite", o.max_sprite}};
}

void from_json(const json& j, SceneOptions& o) {
    constexpr std::string_view w = "dataset.scene";
    reject_unknown_keys(j, {"width", "height", "num_frames", "max_displacement", "min_sprite", "max_sprite"}, w);
    read_opt(j, "width", o.width, w);
    read_opt(j, "height", o.height, w);
    read_opt(j, "num_frames", o.num_frames, w);
    read_opt(j, "max_displacement", o.max_displacement, w);
    read_opt(j, "min_sprite", o.min_sprite, w);
    read_opt(j, "max_sprite", o.max_sprite, w);
}

void to_json(json& j, const DatasetConfig& c) {
    std::vector<std::string> mix;
    for (auto s : c.mix) mix.emplace_back(scenario_name(s));
    j = json{{"num_clips", c.num_clips},
             {"mix", mix},
             {"scene", c.scene},
             {"queries_per_clip", c.queries_per_clip},
             {"visible_fraction", c.visible_fraction},
             {"moving_fraction", c.moving_fraction},
             {"seed", c.seed}};
}

void from_json(const json& j, DatasetConfig& c) {
    constexpr std::string_view w = "dataset";
    reject_unknown_keys(j, {"num_clips", "mix", "scene", "queries_per_clip", "visible_fraction", "moving_fraction", "seed"},
                        w);
    read_opt(j, "num_clips", c.num_clips, w);
    if (auto it = j.find("mix"); it != j.end()) {
        std::vector<std::string> names;
        read_opt(j, "mix", names, w);
        if (names.empty()) throw Error(ErrorKind::config, "dataset.mix: empty scenario list");
        c.mix.clear();
        for (const auto& n : names) c.mix.push_back(parse_scenario(n));
    }
    read_opt(j, "scene", c.scene, w);
    read_opt(j, "queries_per_clip", c.queries_per_clip, w);
    read_opt(j, "visible_fraction", c.visible_fraction, w);
    read_opt(j, "moving_fraction", c.moving_fraction, w);
    read_opt(j, "seed", c.seed, w);
}

}  // namespace synth
}  // namespace kltrace
