#include "dfgp/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "dfgp/error.hpp"

namespace dfgp::io {

namespace {

std::vector<std::string> split(const std::string& line, char sep = ',') {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

double to_double(const std::string& s, const fs::path& where) {
    const std::string t = trim(s);
    char* end = nullptr;
    const double v = std::strtod(t.c_str(), &end);
    if (t.empty() || end != t.c_str() + t.size())
        throw IoError(where.string() + ": cannot parse number '" + s + "'");
    return v;
}

long long to_int(const std::string& s, const fs::path& where) {
    const std::string t = trim(s);
    long long v = 0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || ptr != t.data() + t.size())
        throw IoError(where.string() + ": cannot parse integer '" + s + "'");
    return v;
}

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    return out;
}

}  // namespace

std::size_t CsvTable::column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw IoError("missing CSV column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
}

CsvTable read_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    CsvTable t;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        auto fields = split(line);
        for (auto& f : fields) f = trim(f);
        if (first) {
            t.header = std::move(fields);
            first = false;
            continue;
        }
        if (fields.size() != t.header.size())
            throw IoError(path.string() + ": row has " + std::to_string(fields.size()) + " fields, header has " +
                          std::to_string(t.header.size()));
        t.rows.push_back(std::move(fields));
    }
    if (first) throw IoError(path.string() + ": empty file");
    return t;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<TimeSlice> read_observations(const fs::path& observations, const fs::path& footprints,
                                         const BauGrid& grid, int instruments, int horizon) {
    const CsvTable fp = read_csv(footprints);
    const auto c_id = fp.column("footprint_id"), c_bau = fp.column("bau_index");
    std::map<long long, std::vector<std::size_t>> cover;
    for (const auto& row : fp.rows) {
        const long long b = to_int(row[c_bau], footprints);
        if (b < 0) throw InvalidFootprint("negative BAU index in " + footprints.string());
        cover[to_int(row[c_id], footprints)].push_back(static_cast<std::size_t>(b));
    }

    const CsvTable ob = read_csv(observations);
    const auto c_t = ob.column("time"), c_k = ob.column("instrument"), c_f = ob.column("footprint_id"),
               c_v = ob.column("value"), c_w = ob.column("var_factor");
    int big_t = horizon;
    if (big_t <= 0)
        for (const auto& row : ob.rows) big_t = std::max<int>(big_t, static_cast<int>(to_int(row[c_t], observations)));
    if (big_t < 1) throw IoError(observations.string() + ": no observations");

    struct Rec {
        int instrument;
        long long id;
        double value, factor;
    };
    std::vector<std::vector<Rec>> by_time(static_cast<std::size_t>(big_t));
    for (const auto& row : ob.rows) {
        const auto t = static_cast<int>(to_int(row[c_t], observations));
        if (t < 1 || t > big_t) throw IoError(observations.string() + ": time " + std::to_string(t) + " out of range");
        by_time[static_cast<std::size_t>(t - 1)].push_back({static_cast<int>(to_int(row[c_k], observations)),
                                                           to_int(row[c_f], observations),
                                                           to_double(row[c_v], observations),
                                                           to_double(row[c_w], observations)});
    }

    std::vector<TimeSlice> out;
    for (int t = 1; t <= big_t; ++t) {
        const auto& recs = by_time[static_cast<std::size_t>(t - 1)];
        TimeSlice s;
        s.time = t;
        s.z.resize(static_cast<Index>(recs.size()));
        s.var_factor.resize(static_cast<Index>(recs.size()));
        std::vector<Footprint> fps;
        for (std::size_t i = 0; i < recs.size(); ++i) {
            const auto it = cover.find(recs[i].id);
            if (it == cover.end())
                throw InvalidFootprint("footprint " + std::to_string(recs[i].id) + " has no BAUs in " +
                                       footprints.string());
            if (recs[i].instrument < 1 || recs[i].instrument > instruments)
                throw IoError(observations.string() + ": instrument " + std::to_string(recs[i].instrument) +
                              " outside 1.." + std::to_string(instruments));
            fps.push_back({it->second, recs[i].instrument, t});
            s.z[static_cast<Index>(i)] = recs[i].value;
            s.var_factor[static_cast<Index>(i)] = recs[i].factor;
            s.instrument.push_back(recs[i].instrument);
            s.footprint_id.push_back(recs[i].id);
        }
        s.footprints = footprint_matrix(fps, grid);
        out.push_back(std::move(s));
    }
    return out;
}

void write_observations(const fs::path& observations, const fs::path& footprints, const ObservationSet& obs,
                        const BauGrid& grid) {
    auto out = open_out(observations);
    out << "time,instrument,footprint_id,value,var_factor\n";
    for (const auto& s : obs.slices)
        for (Index i = 0; i < s.size(); ++i)
            out << s.time << ',' << s.instrument[static_cast<std::size_t>(i)] << ','
                << s.footprint_id[static_cast<std::size_t>(i)] << ',' << format_double(s.z[i]) << ','
                << format_double(s.var_factor[i]) << '\n';
    auto fo = open_out(footprints);
    fo << "footprint_id,bau_index\n";
    for (std::size_t id = 0; id < obs.footprints.size(); ++id)
        for (std::size_t b : obs.footprints[id].bau_indices) fo << id << ',' << b << '\n';
    (void)grid;
}

void write_truth(const fs::path& path, const Truth& truth, const BauGrid& grid) {
    auto out = open_out(path);
    out << "time,bau_index,y_true\n";
    for (std::size_t t = 0; t < truth.y.size(); ++t)
        for (Index i = 0; i < truth.y[t].size(); ++i)
            out << t + 1 << ',' << grid.grid_index(i) << ',' << format_double(truth.y[t][i]) << '\n';
}

void write_latent(const fs::path& path, const Truth& truth, const BauGrid& grid) {
    auto out = open_out(path);
    out << "kind,time,index,value\n";
    for (std::size_t t = 0; t < truth.eta.size(); ++t)
        for (Index i = 0; i < truth.eta[t].size(); ++i)
            out << "eta," << t << ',' << i << ',' << format_double(truth.eta[t][i]) << '\n';
    for (std::size_t t = 0; t < truth.xi.size(); ++t)
        for (Index i = 0; i < truth.xi[t].size(); ++i)
            out << "xi," << t + 1 << ',' << grid.grid_index(i) << ',' << format_double(truth.xi[t][i]) << '\n';
}

std::vector<Vector> read_truth(const fs::path& path, const BauGrid& grid) {
    const CsvTable t = read_csv(path);
    const auto c_t = t.column("time"), c_b = t.column("bau_index"), c_y = t.column("y_true");
    std::vector<Vector> out;
    for (const auto& row : t.rows) {
        const auto time = static_cast<std::size_t>(to_int(row[c_t], path));
        if (time < 1) throw IoError(path.string() + ": time must be >= 1");
        while (out.size() < time) out.push_back(Vector::Constant(static_cast<Index>(grid.size()), std::nan("")));
        const auto s = grid.state_index(static_cast<std::size_t>(to_int(row[c_b], path)));
        if (!s) throw IoError(path.string() + ": BAU outside the valid grid");
        out[time - 1][*s] = to_double(row[c_y], path);
    }
    return out;
}

void write_prediction(const fs::path& path, const PredictionField& field, const BauGrid& grid) {
    auto out = open_out(path);
    out << "time,bau_index,mean,stderr\n";
    for (std::size_t i = 0; i < field.bau.size(); ++i)
        out << field.time << ',' << grid.grid_index(field.bau[i]) << ','
            << format_double(field.mean[static_cast<Index>(i)]) << ','
            << format_double(field.std_error[static_cast<Index>(i)]) << '\n';
}

void write_params(const fs::path& path, const DfgpParams& p) {
    auto out = open_out(path);
    out << "name,time,row,col,value\n";
    auto mat = [&out](const char* name, int t, const Matrix& m) {
        for (Index i = 0; i < m.rows(); ++i)
            for (Index j = 0; j < m.cols(); ++j)
                out << name << ',' << t << ',' << i << ',' << j << ',' << format_double(m(i, j)) << '\n';
    };
    for (int t = 1; t <= p.horizon(); ++t) {
        const auto ti = static_cast<std::size_t>(t - 1);
        for (Index i = 0; i < p.beta[ti].size(); ++i)
            out << "beta," << t << ',' << i << ",0," << format_double(p.beta[ti][i]) << '\n';
    }
    for (int t = 1; t <= p.horizon(); ++t) mat("H", t, p.H[static_cast<std::size_t>(t - 1)]);
    for (int t = 1; t <= p.horizon(); ++t) mat("U", t, p.U[static_cast<std::size_t>(t - 1)]);
    mat("K0", 0, p.K0);
    for (int t = 1; t <= p.horizon(); ++t) {
        const auto ti = static_cast<std::size_t>(t - 1);
        out << "gamma," << t << ",0,0," << format_double(p.car[ti].gamma) << '\n';
        out << "tau2," << t << ",0,0," << format_double(p.car[ti].tau2) << '\n';
        for (Index k = 0; k < p.sigma2[ti].size(); ++k)
            out << "sigma2," << t << ',' << k + 1 << ",0," << format_double(p.sigma2[ti][k]) << '\n';
    }
}

DfgpParams read_params(const fs::path& path) {
    const CsvTable tab = read_csv(path);
    const auto c_n = tab.column("name"), c_t = tab.column("time"), c_r = tab.column("row"), c_c = tab.column("col"),
               c_v = tab.column("value");
    struct Entry {
        long long t, i, j;
        double v;
    };
    std::map<std::string, std::vector<Entry>> by_name;
    long long horizon = 0;
    for (const auto& row : tab.rows) {
        const Entry e{to_int(row[c_t], path), to_int(row[c_r], path), to_int(row[c_c], path),
                      to_double(row[c_v], path)};
        if (e.t < 0 || e.i < 0 || e.j < 0) throw IoError(path.string() + ": negative index");
        horizon = std::max(horizon, e.t);
        by_name[row[c_n]].push_back(e);
    }
    if (horizon < 1) throw IoError(path.string() + ": no time-indexed parameters");
    auto dims = [&](const std::string& name) {
        long long rows = 0, cols = 0;
        for (const auto& e : by_name[name]) {
            rows = std::max(rows, e.i + 1);
            cols = std::max(cols, e.j + 1);
        }
        return std::pair<Index, Index>{rows, cols};
    };
    const auto h = static_cast<std::size_t>(horizon);
    DfgpParams p;
    const auto [p_rows, p_cols] = dims("beta");
    const auto [r_rows, r_cols] = dims("K0");
    const auto [k_rows, k_cols] = dims("sigma2");
    (void)p_cols;
    (void)r_cols;
    (void)k_cols;
    p.beta.assign(h, Vector::Zero(p_rows));
    p.H.assign(h, Matrix::Zero(r_rows, r_rows));
    p.U.assign(h, Matrix::Zero(r_rows, r_rows));
    p.K0 = Matrix::Zero(r_rows, r_rows);
    p.car.assign(h, CarParams{});
    p.sigma2.assign(h, Vector::Zero(k_rows - 1));
    for (const auto& [name, entries] : by_name) {
        for (const auto& e : entries) {
            const auto ti = static_cast<std::size_t>(std::max<long long>(e.t, 1) - 1);
            if (name == "beta") p.beta[ti][e.i] = e.v;
            else if (name == "H") p.H[ti](e.i, e.j) = e.v;
            else if (name == "U") p.U[ti](e.i, e.j) = e.v;
            else if (name == "K0") p.K0(e.i, e.j) = e.v;
            else if (name == "gamma") p.car[ti].gamma = e.v;
            else if (name == "tau2") p.car[ti].tau2 = e.v;
            else if (name == "sigma2") {
                if (e.i < 1) throw IoError(path.string() + ": sigma2 instruments are 1-based");
                p.sigma2[ti][e.i - 1] = e.v;
            } else
                throw IoError(path.string() + ": unknown parameter '" + name + "'");
        }
    }
    return p;
}

void write_trace(const fs::path& path, const std::vector<TracePoint>& trace) {
    auto out = open_out(path);
    out << "iteration,neg2loglik\n";
    for (const auto& tp : trace) out << tp.iteration << ',' << format_double(tp.neg2loglik) << '\n';
}

void write_metrics(const fs::path& path, const std::vector<MetricRow>& rows, bool with_subset) {
    auto out = open_out(path);
    out << (with_subset ? "method,protocol,time,subset,rmspe,crps,n_holdout\n" : "method,protocol,time,rmspe,crps,n_holdout\n");
    for (const auto& r : rows) {
        out << r.method << ',' << r.protocol << ',' << (r.time == 0 ? std::string("avg") : std::to_string(r.time)) << ',';
        if (with_subset) out << r.subset << ',';
        out << format_double(r.rmspe) << ',' << format_double(r.crps) << ',' << r.n_holdout << '\n';
    }
}

namespace {

const char* kind_name(HoldoutKind k) {
    switch (k) {
        case HoldoutKind::block: return "block";
        case HoldoutKind::random: return "random";
        default: return "kept";
    }
}

std::int64_t record_id(const TimeSlice& s, std::size_t row) {
    return s.footprint_id.empty() ? static_cast<std::int64_t>(row) : s.footprint_id[row];
}

}  // namespace

void write_holdout_mask(const fs::path& path, const HoldoutMask& mask, const std::vector<TimeSlice>& data) {
    auto out = open_out(path);
    out << "time,instrument,footprint_id,subset\n";
    for (std::size_t t = 0; t < mask.kind.size(); ++t)
        for (std::size_t i = 0; i < mask.kind[t].size(); ++i)
            if (mask.kind[t][i] != HoldoutKind::kept)
                out << t + 1 << ',' << data[t].instrument[i] << ',' << record_id(data[t], i) << ','
                    << kind_name(mask.kind[t][i]) << '\n';
}

void write_cv_predictions(const fs::path& path, const CvResult& res, const std::vector<TimeSlice>& data) {
    auto out = open_out(path);
    out << "method,time,footprint_id,subset,value,mean,sd\n";
    for (const auto& p : res.predictions)
        out << to_string(p.method) << ',' << p.time << ',' << record_id(data[static_cast<std::size_t>(p.time - 1)], p.row)
            << ',' << kind_name(p.kind) << ',' << format_double(p.value) << ',' << format_double(p.mean) << ','
            << format_double(p.sd) << '\n';
}

void write_triplets(const fs::path& path, const SparseMatrix& m) {
    auto out = open_out(path);
    out << "row,col,value\n";
    for (Index k = 0; k < m.outerSize(); ++k)
        for (SparseMatrix::InnerIterator it(m, k); it; ++it)
            out << it.row() << ',' << it.col() << ',' << format_double(it.value()) << '\n';
}

void write_basis(const fs::path& path, const BisquareBasis& basis) {
    auto out = open_out(path);
    out << "center_x,center_y,radius\n";
    for (std::size_t j = 0; j < basis.size(); ++j)
        out << format_double(basis.centers()[j].x) << ',' << format_double(basis.centers()[j].y) << ','
            << format_double(basis.radii()[j]) << '\n';
}

BisquareBasis read_basis(const fs::path& path) {
    const CsvTable t = read_csv(path);
    const auto cx = t.column("center_x"), cy = t.column("center_y"), cr = t.column("radius");
    std::vector<Coord> centers;
    std::vector<double> radii;
    for (const auto& row : t.rows) {
        centers.push_back({to_double(row[cx], path), to_double(row[cy], path)});
        radii.push_back(to_double(row[cr], path));
    }
    return BisquareBasis(std::move(centers), std::move(radii));
}

std::vector<bool> read_mask(const fs::path& path, int nx, int ny) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open mask " + path.string());
    std::vector<bool> mask;
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        const auto fields = split(line);
        if (static_cast<int>(fields.size()) != nx)
            throw IoError(path.string() + ": mask row " + std::to_string(rows) + " needs " + std::to_string(nx) +
                          " values");
        for (const auto& f : fields) mask.push_back(to_int(f, path) != 0);
        ++rows;
    }
    if (rows != ny) throw IoError(path.string() + ": mask needs " + std::to_string(ny) + " rows");
    return mask;
}

namespace {

constexpr char kMagic[8] = {'D', 'F', 'G', 'P', 'C', 'K', 'P', 'T'};

void put_u32(std::ostream& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.put(static_cast<char>((v >> (8 * b)) & 0xFFU));
}

void put_f64(std::ostream& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) out.put(static_cast<char>((bits >> (8 * b)) & 0xFFU));
}

std::uint64_t get_bytes(std::istream& in, int n, const fs::path& path) {
    std::uint64_t v = 0;
    for (int b = 0; b < n; ++b) {
        const int c = in.get();
        if (c == EOF) throw IoError(path.string() + ": truncated checkpoint");
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * b);
    }
    return v;
}

}  // namespace

void write_checkpoint(const fs::path& path, const Checkpoint& cp) {
    if (cp.time.size() != cp.state.size()) throw InvalidArgument("checkpoint: time and state counts differ");
    const std::uint32_t r = cp.state.empty() ? 0 : static_cast<std::uint32_t>(cp.state.front().mean.size());
    auto out = open_out(path);
    out.write(kMagic, sizeof kMagic);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(cp.state.size()));
    put_u32(out, r);
    for (std::size_t k = 0; k < cp.state.size(); ++k) {
        const Moments& m = cp.state[k];
        if (m.mean.size() != Index(r) || m.cov.rows() != Index(r) || m.cov.cols() != Index(r))
            throw InvalidArgument("checkpoint: inconsistent state dimension");
        put_u32(out, static_cast<std::uint32_t>(cp.time[k]));
        for (Index i = 0; i < m.mean.size(); ++i) put_f64(out, m.mean[i]);
        for (Index i = 0; i < m.cov.rows(); ++i)
            for (Index j = 0; j < m.cov.cols(); ++j) put_f64(out, m.cov(i, j));
    }
}

Checkpoint read_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || !std::equal(magic, magic + 8, kMagic)) throw IoError(path.string() + ": not a state checkpoint");
    const auto version = static_cast<std::uint32_t>(get_bytes(in, 4, path));
    if (version != kCheckpointVersion)
        throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    const auto count = get_bytes(in, 4, path);
    const auto r = static_cast<Index>(get_bytes(in, 4, path));
    Checkpoint cp;
    for (std::uint64_t k = 0; k < count; ++k) {
        cp.time.push_back(static_cast<std::int32_t>(static_cast<std::uint32_t>(get_bytes(in, 4, path))));
        Moments m{Vector(r), Matrix(r, r)};
        for (Index i = 0; i < r; ++i) m.mean[i] = std::bit_cast<double>(get_bytes(in, 8, path));
        for (Index i = 0; i < r; ++i)
            for (Index j = 0; j < r; ++j) m.cov(i, j) = std::bit_cast<double>(get_bytes(in, 8, path));
        cp.state.push_back(std::move(m));
    }
    return cp;
}

namespace {

std::string hex_digest(const unsigned char* md, unsigned len) {
    std::ostringstream os;
    for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return os.str();
}

std::string sha256_bytes(const char* data, std::size_t n) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    if (EVP_Digest(data, n, md, &len, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 digest failed");
    return hex_digest(md, len);
}

}  // namespace

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return sha256_bytes(bytes.data(), bytes.size());
}

std::string sha256_text(const std::string& text) { return sha256_bytes(text.data(), text.size()); }

void write_key_values(const fs::path& path, const std::vector<std::pair<std::string, std::string>>& kv) {
    auto out = open_out(path);
    for (const auto& [k, v] : kv) out << k << '=' << v << '\n';
}

}  // namespace dfgp::io
