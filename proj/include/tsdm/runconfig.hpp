#pragma once

#include <stdexcept>
#include <string>

#include <json.hpp>

#include "tsdm/config_json.hpp"
#include "tsdm/diagnosis.hpp"
#include "tsdm/trainer.hpp"

namespace tsdm {

/// All module configurations of one run, parsed from a single canonical JSON
/// document. Every section is optional and falls back to defaults; unknown
/// keys anywhere are rejected.
struct RunConfig {
    unet::Config unet;
    TrainConfig train;
    diag::CnnConfig cnn;
};

namespace runconfig_detail {

inline void parse_schedule(const json& j, TrainConfig& t) {
    reject_unknown_keys(j, {"total_steps", "beta_start", "beta_end"}, "config.schedule");
    t.total_steps = j.value("total_steps", t.total_steps);
    t.beta_start = j.value("beta_start", t.beta_start);
    t.beta_end = j.value("beta_end", t.beta_end);
}

inline void parse_train(const json& j, TrainConfig& t) {
    reject_unknown_keys(j, {"batch_size", "epochs", "learning_rate", "seed", "checkpoint_every"},
                        "config.train");
    t.batch_size = j.value("batch_size", t.batch_size);
    t.epochs = j.value("epochs", t.epochs);
    t.learning_rate = j.value("learning_rate", t.learning_rate);
    t.seed = j.value("seed", t.seed);
    t.checkpoint_every = j.value("checkpoint_every", t.checkpoint_every);
}

inline void parse_cnn(const json& j, diag::CnnConfig& c) {
    reject_unknown_keys(j,
                        {"filters", "kernel", "stride", "pooling", "dense_width", "learning_rate",
                         "epochs", "batch_size", "seed"},
                        "config.cnn");
    c.filters = j.value("filters", c.filters);
    c.kernel = j.value("kernel", c.kernel);
    c.stride = j.value("stride", c.stride);
    c.pooling = j.value("pooling", c.pooling);
    c.dense_width = j.value("dense_width", c.dense_width);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.validate();
}

}  // namespace runconfig_detail

inline RunConfig run_config_from_json(const json& j) {
    reject_unknown_keys(j, {"schedule", "unet", "train", "cnn"}, "config");
    RunConfig rc;
    if (j.contains("schedule")) runconfig_detail::parse_schedule(j.at("schedule"), rc.train);
    if (j.contains("unet")) rc.unet = unet_json::from_json(j.at("unet"), "config.unet");
    if (j.contains("train")) runconfig_detail::parse_train(j.at("train"), rc.train);
    if (j.contains("cnn")) runconfig_detail::parse_cnn(j.at("cnn"), rc.cnn);
    return rc;
}

inline json run_config_to_json(const RunConfig& rc) {
    return json{
        {"schedule",
         {{"total_steps", rc.train.total_steps},
          {"beta_start", rc.train.beta_start},
          {"beta_end", rc.train.beta_end}}},
        {"unet", unet_json::to_json(rc.unet)},
        {"train",
         {{"batch_size", rc.train.batch_size},
          {"epochs", rc.train.epochs},
          {"learning_rate", rc.train.learning_rate},
          {"seed", rc.train.seed},
          {"checkpoint_every", rc.train.checkpoint_every}}},
        {"cnn",
         {{"filters", rc.cnn.filters},
          {"kernel", rc.cnn.kernel},
          {"stride", rc.cnn.stride},
          {"pooling", rc.cnn.pooling},
          {"dense_width", rc.cnn.dense_width},
          {"learning_rate", rc.cnn.learning_rate},
          {"epochs", rc.cnn.epochs},
          {"batch_size", rc.cnn.batch_size},
          {"seed", rc.cnn.seed}}},
    };
}

inline RunConfig load_run_config(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw std::invalid_argument("config " + path + ": " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace tsdm
