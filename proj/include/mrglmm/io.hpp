#pragma once

#include "mrglmm/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>

namespace mrglmm::io {

// Provenance carried by every written file: "# config_hash=<hex> seed=<n>" in
// CSVs, top-level fields in JSON.
struct Stamp {
  std::string config_hash;
  std::uint64_t seed = 0;

  std::string comment() const;
  bool empty() const { return config_hash.empty(); }
};

// FNV-1a 64 of the compact canonical dump (keys sorted), as 16 hex digits.
std::string config_hash(const nlohmann::json& config);

// Writes responses.csv, covariates.csv and manifest.json into `dir`.
void write_dataset(const std::string& dir, const LongitudinalNetworkDataset& dataset, const Family& family,
                   const Stamp& stamp = {});

struct LoadedDataset {
  LongitudinalNetworkDataset dataset;
  Family family;
};

// Throws IoError with file/line/field context on any malformed input.
LoadedDataset read_dataset(const std::string& dir);

// <prefix>U.csv, <prefix>V.csv or <prefix>Lambda.csv, <prefix>B.csv (sparse
// triplets), <prefix>params.json. V is omitted when it equals U exactly.
void write_params(const std::string& dir, const ModelParams& params, const std::string& prefix = "",
                  const Stamp& stamp = {});

ModelParams read_params(const std::string& dir, const std::string& prefix = "");

nlohmann::json read_json(const std::string& path);
void write_json(const std::string& path, const nlohmann::json& doc);
void write_text(const std::string& path, const std::string& text);

// "%.17g": exact double round trip.
std::string format_double(double v);

}  // namespace mrglmm::io
