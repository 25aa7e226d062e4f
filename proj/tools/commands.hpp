#pragma once

// Command implementations behind the `sitsmamba` executable. Kept apart
// from argument parsing so tests can drive them directly.

#include <filesystem>
#include <iosfwd>
#include <string>

#include "sitsmamba/config.hpp"

namespace sitsmamba::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kVerifyFailed = 3 };

struct Paths {
  std::filesystem::path out;         // output directory
  std::filesystem::path data;        // dataset directory (train/valid/test files)
  std::filesystem::path input;       // single dataset file for eval / predict
  std::filesystem::path checkpoint;  // eval / predict
};

inline const char* kTrainFile = "train.sitsds";
inline const char* kValidFile = "valid.sitsds";
inline const char* kTestFile = "test.sitsds";
inline const char* kManifestFile = "manifest.txt";

/// Writes train/valid/test splits. Split seeds derive from the run seed;
/// all splits share the class curves (curve_seed).
void gen_data(const RunConfig& config, const Paths& paths, std::ostream& log);
/// Trains on <data>/train, selects on <data>/valid.
void train_command(const RunConfig& config, const Paths& paths, std::ostream& log);
/// Metrics CSV and console table for one dataset file.
void eval_command(const RunConfig& config, const Paths& paths, std::ostream& log);
/// One PGM label map per sample plus a legend CSV.
void predict_command(const RunConfig& config, const Paths& paths, std::ostream& log);
/// Oracle suites; returns false when any check fails.
bool verify_command(std::ostream& log);

/// The three split configs generated by gen_data.
SyntheticConfig split_config(const RunConfig& config, int split);

/// Rejects datasets whose extents or labels disagree with the model
/// config. Throws ShapeError before any compute happens.
void check_dataset(const Dataset& data, const ModelConfig& model, const std::string& what);

/// Parses argv and runs a command; returns the process exit code.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace sitsmamba::cli
