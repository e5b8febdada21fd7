#pragma once

#include <string>
#include <vector>

namespace mantis {

// Command-line front end: pretrain, finetune, embed, evaluate, calibrate,
// info. Returns the process exit code (0 success, 1 runtime error, 2 usage
// error). All randomness derives from --seed.
int run(const std::vector<std::string>& args);

}  // namespace mantis
