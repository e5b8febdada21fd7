#pragma once

// Dataset ingestion (UCR/UEA-style TSV), synthetic desk-scale fixtures, and
// checkpoint persistence. File formats are documented in
// docs/checkpoint-format.md and README.md.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mantis/adapters.hpp"
#include "mantis/dataset.hpp"
#include "mantis/model.hpp"
#include "mantis/probe.hpp"

namespace mantis {

// One sample per line: label, then values, tab-separated. Multivariate long
// form: each value cell is a colon-joined tuple of the d channel values.
// Labels are remapped to 0..K-1 by sorted original value.
Dataset load_tsv(const std::string& path);

// Multivariate alternative: one univariate file per channel; labels must
// agree across files.
Dataset load_tsv_channels(const std::vector<std::string>& paths);

void write_tsv(const Dataset& ds, const std::string& path);

enum class SyntheticKind { two_cluster, sine_vs_square, multichannel_redundant };

SyntheticKind synthetic_kind_from_name(const std::string& name);

// Deterministic under seed. two_cluster: Gaussian bumps at two locations;
// sine_vs_square: periodic shapes plus noise; multichannel_redundant: d
// channels of which only the first two carry signal.
Dataset make_synthetic(SyntheticKind kind, int n, int t, int d,
                       std::uint64_t seed, float noise = 0.05f);

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

enum class HeadKind { none, head, probe };

struct Checkpoint {
  MantisConfig cfg;
  MantisModel<float> model;
  std::optional<Projector<float>> projector;
  std::optional<Head<float>> head;
  std::optional<LinearProbe> probe;
  std::optional<Adapter> adapter;
};

// Human-readable header (version, architecture fields, tensor directory),
// blank line, then contiguous little-endian float32 payload. load(save(x))
// reproduces every parameter bitwise.
void save_checkpoint(Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mantis
