#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsdm/unet.hpp"

namespace tsdm {

using json = nlohmann::json;

inline void reject_unknown_keys(const json& j, const std::vector<std::string>& known,
                                const std::string& where) {
    if (!j.is_object()) throw std::invalid_argument(where + ": expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const std::string& k : known)
            if (k == key) {
                ok = true;
                break;
            }
        if (!ok) throw std::invalid_argument(where + ": unknown key '" + key + "'");
    }
}

namespace unet_json {

inline json to_json(const unet::Config& c) {
    return json{
        {"attn_middle", c.attn_middle},
        {"attn_up_stages", c.attn_up_stages},
        {"base_channels", c.base_channels},
        {"channel_multipliers", c.channel_multipliers},
        {"down_kernel_size", c.down_kernel_size},
        {"length", c.length},
        {"norm_groups", c.norm_groups},
        {"precision", c.precision == unet::Precision::Double ? "double" : "single"},
        {"res_blocks_down", c.res_blocks_down},
        {"res_blocks_up", c.res_blocks_up},
        {"res_kernel_size", c.res_kernel_size},
        {"time_embed_dim", c.time_embed_dim},
        {"up_kernel_size", c.up_kernel_size},
    };
}

inline unet::Config from_json(const json& j, const std::string& where = "unet config") {
    reject_unknown_keys(j,
                        {"attn_middle", "attn_up_stages", "base_channels", "channel_multipliers",
                         "down_kernel_size", "length", "norm_groups", "precision",
                         "res_blocks_down", "res_blocks_up", "res_kernel_size", "time_embed_dim",
                         "up_kernel_size"},
                        where);
    unet::Config c;
    c.attn_middle = j.value("attn_middle", c.attn_middle);
    c.attn_up_stages = j.value("attn_up_stages", c.attn_up_stages);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.channel_multipliers = j.value("channel_multipliers", c.channel_multipliers);
    c.down_kernel_size = j.value("down_kernel_size", c.down_kernel_size);
    c.length = j.value("length", c.length);
    c.norm_groups = j.value("norm_groups", c.norm_groups);
    c.res_blocks_down = j.value("res_blocks_down", c.res_blocks_down);
    c.res_blocks_up = j.value("res_blocks_up", c.res_blocks_up);
    c.res_kernel_size = j.value("res_kernel_size", c.res_kernel_size);
    c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
    c.up_kernel_size = j.value("up_kernel_size", c.up_kernel_size);
    if (j.contains("precision")) {
        const std::string p = j.at("precision").get<std::string>();
        if (p == "single")
            c.precision = unet::Precision::Single;
        else if (p == "double")
            c.precision = unet::Precision::Double;
        else
            throw std::invalid_argument(where + ": precision must be 'single' or 'double'");
    }
    c.validate();
    return c;
}

}  // namespace unet_json

/// Canonical serialized form of a U-Net config: sorted keys, no whitespace.
/// This exact byte string is embedded in checkpoints.
inline std::string canonical_unet_config_json(const unet::Config& c) {
    return unet_json::to_json(c).dump();
}

}  // namespace tsdm
