#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dfgp/basis.hpp"
#include "dfgp/dynamics.hpp"
#include "dfgp/estimate.hpp"
#include "dfgp/evaluate.hpp"
#include "dfgp/grid.hpp"
#include "dfgp/synth.hpp"

namespace dfgp::io {

namespace fs = std::filesystem;

/// Minimal CSV table: header plus rows of string fields. No quoting.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const;
};

CsvTable read_csv(const fs::path& path);
/// Doubles are written with %.17g so files round-trip exactly.
std::string format_double(double v);

/// Observation records `time,instrument,footprint_id,value,var_factor` plus footprints
/// `footprint_id,bau_index` (grid indices), assembled into one slice per time 1..horizon.
/// horizon = 0 takes the largest time present.
std::vector<TimeSlice> read_observations(const fs::path& observations, const fs::path& footprints,
                                         const BauGrid& grid, int instruments, int horizon = 0);
void write_observations(const fs::path& observations, const fs::path& footprints, const ObservationSet& obs,
                        const BauGrid& grid);

/// Truth `time,bau_index,y_true` and latent states `kind,time,index,value` (kind eta or xi).
void write_truth(const fs::path& path, const Truth& truth, const BauGrid& grid);
void write_latent(const fs::path& path, const Truth& truth, const BauGrid& grid);
/// BAU-level truth per time (state-index order) from a truth CSV.
std::vector<Vector> read_truth(const fs::path& path, const BauGrid& grid);

/// PredictionField rows `time,bau_index,mean,stderr`.
void write_prediction(const fs::path& path, const PredictionField& field, const BauGrid& grid);

/// Flat parameter layout `name,time,row,col,value`: beta (t,i), H and U (t,i,j), K0 (0,i,j),
/// gamma and tau2 (t), sigma2 (t,k). Times and instruments are 1-based, matrix indices 0-based.
void write_params(const fs::path& path, const DfgpParams& params);
DfgpParams read_params(const fs::path& path);

void write_trace(const fs::path& path, const std::vector<TracePoint>& trace);
void write_metrics(const fs::path& path, const std::vector<MetricRow>& rows, bool with_subset);
void write_holdout_mask(const fs::path& path, const HoldoutMask& mask, const std::vector<TimeSlice>& data);
void write_cv_predictions(const fs::path& path, const CvResult& res, const std::vector<TimeSlice>& data);

/// Coordinate-triplet dump `row,col,value` of a sparse matrix (lower and upper entries).
void write_triplets(const fs::path& path, const SparseMatrix& m);

/// Basis layout `center_x,center_y,radius`.
void write_basis(const fs::path& path, const BisquareBasis& basis);
BisquareBasis read_basis(const fs::path& path);

/// Validity mask: ny lines of nx comma-separated 0/1 values, first line is row 0.
std::vector<bool> read_mask(const fs::path& path, int nx, int ny);

/// Versioned little-endian state checkpoint; see docs/checkpoint_format.md.
inline constexpr std::uint32_t kCheckpointVersion = 1;
struct Checkpoint {
    std::vector<int> time;
    std::vector<Moments> state;
};
void write_checkpoint(const fs::path& path, const Checkpoint& cp);
Checkpoint read_checkpoint(const fs::path& path);

/// Lower-case hex SHA-256 of a file's bytes or of a string.
std::string sha256_file(const fs::path& path);
std::string sha256_text(const std::string& text);

/// `key=value` lines in the given (sorted) order.
void write_key_values(const fs::path& path, const std::vector<std::pair<std::string, std::string>>& kv);

}  // namespace dfgp::io
