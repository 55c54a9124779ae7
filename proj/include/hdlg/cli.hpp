#pragma once

#include <map>
#include <string>
#include <vector>

#include "hdlg/config.hpp"

namespace hdlg {

// Resolves a flat dotted-key config file, then applies overrides on top
// (override values win). Unknown keys and unparseable values are errors.
std::pair<RunConfig, EncoderConfig> load_config(
    const std::string& path, const std::map<std::string, std::string>& overrides = {});

// key=value view of the fully resolved configuration, echoed into run logs
std::string config_dump(const RunConfig& run, const EncoderConfig& enc);

// exit codes: 0 success, 1 usage error, 2 runtime error
int dispatch(const std::vector<std::string>& args);

}  // namespace hdlg
