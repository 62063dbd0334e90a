#include "mrglmm/io.hpp"

#include "mrglmm/errors.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace mrglmm::io {

namespace fs = std::filesystem;
using nlohmann::json;

std::string Stamp::comment() const {
  return "# config_hash=" + config_hash + " seed=" + std::to_string(seed);
}

std::string config_hash(const json& config) {
  // nlohmann::json objects are key-sorted, so dump() is canonical.
  const std::string text = config.dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir + (ec ? ": " + ec.message() : ""));
}

std::ofstream open_out(const std::string& path) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) ensure_dir(parent.string());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  return os;
}

void close_out(std::ofstream& os, const std::string& path) {
  os.flush();
  if (!os) throw IoError("failed writing " + path);
}

// Line-oriented CSV reader; skips blank and '#' lines, tracks line numbers.
class CsvReader {
 public:
  explicit CsvReader(std::string path) : path_(std::move(path)), in_(path_) {
    if (!in_) throw IoError("cannot read " + path_);
  }

  bool next(std::vector<std::string_view>& fields) {
    while (std::getline(in_, line_)) {
      ++lineno_;
      if (!line_.empty() && line_.back() == '\r') line_.pop_back();
      if (line_.empty() || line_[0] == '#') continue;
      fields.clear();
      std::size_t start = 0;
      for (;;) {
        const auto comma = line_.find(',', start);
        if (comma == std::string::npos) {
          fields.emplace_back(line_.data() + start, line_.size() - start);
          break;
        }
        fields.emplace_back(line_.data() + start, comma - start);
        start = comma + 1;
      }
      return true;
    }
    return false;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw IoError(path_ + " line " + std::to_string(lineno_) + ": " + msg);
  }

  double number(std::string_view field, const char* name) const {
    double v = 0.0;
    const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
    if (res.ec != std::errc() || res.ptr != field.data() + field.size()) {
      fail(std::string("field '") + name + "' is not a number: '" + std::string(field) + "'");
    }
    if (!std::isfinite(v)) fail(std::string("field '") + name + "' is not finite");
    return v;
  }

  long long integer(std::string_view field, const char* name) const {
    long long v = 0;
    const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
    if (res.ec != std::errc() || res.ptr != field.data() + field.size()) {
      fail(std::string("field '") + name + "' is not an integer: '" + std::string(field) + "'");
    }
    return v;
  }

  void expect_fields(const std::vector<std::string_view>& fields, std::size_t count) const {
    if (fields.size() != count) {
      fail("expected " + std::to_string(count) + " fields, found " + std::to_string(fields.size()));
    }
  }

 private:
  std::string path_;
  std::ifstream in_;
  std::string line_;
  int lineno_ = 0;
};

template <class T>
T manifest_field(const json& doc, const std::string& path, const char* key) {
  if (!doc.contains(key)) throw IoError(path + ": missing field '" + key + "'");
  try {
    return doc.at(key).get<T>();
  } catch (const json::exception& ex) {
    throw IoError(path + ": field '" + key + "' has the wrong type (" + ex.what() + ")");
  }
}

void write_matrix(const std::string& path, const MatrixXd& M, const Stamp& stamp) {
  auto os = open_out(path);
  if (!stamp.empty()) os << stamp.comment() << '\n';
  for (Eigen::Index c = 0; c < M.cols(); ++c) os << (c ? "," : "") << c;
  os << '\n';
  for (Eigen::Index r = 0; r < M.rows(); ++r) {
    for (Eigen::Index c = 0; c < M.cols(); ++c) os << (c ? "," : "") << format_double(M(r, c));
    os << '\n';
  }
  close_out(os, path);
}

MatrixXd read_matrix(const std::string& path, int rows, int cols) {
  CsvReader csv(path);
  std::vector<std::string_view> f;
  if (!csv.next(f)) throw IoError(path + ": empty file");
  csv.expect_fields(f, static_cast<std::size_t>(cols));
  MatrixXd M(rows, cols);
  for (int r = 0; r < rows; ++r) {
    if (!csv.next(f)) throw IoError(path + ": expected " + std::to_string(rows) + " data rows");
    csv.expect_fields(f, static_cast<std::size_t>(cols));
    for (int c = 0; c < cols; ++c) M(r, c) = csv.number(f[static_cast<size_t>(c)], "value");
  }
  if (csv.next(f)) csv.fail("unexpected extra row");
  return M;
}

}  // namespace

json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  try {
    return json::parse(is);
  } catch (const json::parse_error& ex) {
    throw IoError(path + ": " + ex.what());
  }
}

void write_json(const std::string& path, const json& doc) {
  auto os = open_out(path);
  os << doc.dump(2) << '\n';
  close_out(os, path);
}

void write_text(const std::string& path, const std::string& text) {
  auto os = open_out(path);
  os << text;
  close_out(os, path);
}

void write_dataset(const std::string& dir, const LongitudinalNetworkDataset& dataset, const Family& family,
                   const Stamp& stamp) {
  dataset.validate(family);
  ensure_dir(dir);
  const int n = dataset.n;
  const EntryMask mask = dataset.mask();

  const std::string rpath = path_in(dir, "responses.csv");
  {
    auto os = open_out(rpath);
    if (!stamp.empty()) os << stamp.comment() << '\n';
    os << "subject_id,time_index,row,col,value\n";
    std::string buf;
    for (const auto& subject : dataset.subjects) {
      const std::string sid = std::to_string(subject.id);
      for (int t = 0; t < subject.times(); ++t) {
        const std::string prefix = sid + ',' + std::to_string(t) + ',';
        const MatrixXd& A = subject.responses[static_cast<size_t>(t)];
        for (int j = 0; j < n; ++j) {
          for (int jp = 0; jp < n; ++jp) {
            if (!mask.include(j, jp)) continue;
            buf += prefix;
            buf += std::to_string(j);
            buf += ',';
            buf += std::to_string(jp);
            buf += ',';
            buf += format_double(A(j, jp));
            buf += '\n';
          }
        }
      }
      os << buf;
      buf.clear();
    }
    close_out(os, rpath);
  }

  const std::string cpath = path_in(dir, "covariates.csv");
  {
    auto os = open_out(cpath);
    if (!stamp.empty()) os << stamp.comment() << '\n';
    os << "subject_id,time_index";
    for (int l = 1; l <= dataset.p; ++l) os << ",x" << l;
    os << '\n';
    for (const auto& subject : dataset.subjects) {
      for (int t = 0; t < subject.times(); ++t) {
        os << subject.id << ',' << t;
        for (int l = 0; l < dataset.p; ++l) os << ',' << format_double(subject.covariates[static_cast<size_t>(t)](l));
        os << '\n';
      }
    }
    close_out(os, cpath);
  }

  json manifest;
  manifest["version"] = 1;
  manifest["n"] = n;
  manifest["p"] = dataset.p;
  manifest["family"] = std::string(to_string(family.kind));
  manifest["diagonal_policy"] = std::string(to_string(dataset.diagonal_policy));
  manifest["subjects"] = dataset.subject_count();
  json ids = json::array();
  json times = json::array();
  for (const auto& subject : dataset.subjects) {
    ids.push_back(subject.id);
    times.push_back(subject.times());
  }
  manifest["subject_ids"] = ids;
  manifest["times"] = times;
  if (!stamp.empty()) {
    manifest["config_hash"] = stamp.config_hash;
    manifest["seed"] = stamp.seed;
  }
  write_json(path_in(dir, "manifest.json"), manifest);
}

LoadedDataset read_dataset(const std::string& dir) {
  const std::string mpath = path_in(dir, "manifest.json");
  const json manifest = read_json(mpath);
  if (!manifest.is_object()) throw IoError(mpath + ": expected a JSON object");

  LoadedDataset out;
  auto& data = out.dataset;
  data.n = manifest_field<int>(manifest, mpath, "n");
  data.p = manifest_field<int>(manifest, mpath, "p");
  if (data.n < 1) throw IoError(mpath + ": field 'n' must be >= 1");
  if (data.p < 0) throw IoError(mpath + ": field 'p' must be >= 0");
  try {
    out.family.kind = family_from_string(manifest_field<std::string>(manifest, mpath, "family"));
    data.diagonal_policy = diagonal_policy_from_string(manifest_field<std::string>(manifest, mpath, "diagonal_policy"));
  } catch (const InvalidArgument& ex) {
    throw IoError(mpath + ": " + ex.what());
  }
  const int N = manifest_field<int>(manifest, mpath, "subjects");
  const auto ids = manifest_field<std::vector<std::uint64_t>>(manifest, mpath, "subject_ids");
  const auto times = manifest_field<std::vector<int>>(manifest, mpath, "times");
  if (static_cast<int>(ids.size()) != N || static_cast<int>(times.size()) != N) {
    throw IoError(mpath + ": fields 'subject_ids' and 'times' must have 'subjects' entries");
  }

  const int n = data.n;
  const EntryMask mask = data.mask();
  std::map<std::uint64_t, std::size_t> slot;
  data.subjects.resize(static_cast<size_t>(N));
  std::vector<std::vector<std::vector<char>>> seen(static_cast<size_t>(N));
  std::vector<std::vector<char>> seen_x(static_cast<size_t>(N));
  for (int i = 0; i < N; ++i) {
    const auto k = static_cast<size_t>(i);
    if (!slot.emplace(ids[k], k).second) {
      throw IoError(mpath + ": duplicate subject id " + std::to_string(ids[k]) + " in 'subject_ids'");
    }
    if (times[k] < 1) throw IoError(mpath + ": field 'times' entry " + std::to_string(i) + " must be >= 1");
    auto& subject = data.subjects[k];
    subject.id = ids[k];
    subject.responses.assign(static_cast<size_t>(times[k]), MatrixXd::Zero(n, n));
    subject.covariates.assign(static_cast<size_t>(times[k]), VectorXd::Zero(data.p));
    seen[k].assign(static_cast<size_t>(times[k]), std::vector<char>(static_cast<size_t>(n) * n, 0));
    seen_x[k].assign(static_cast<size_t>(times[k]), 0);
  }

  auto locate = [&](const CsvReader& csv, std::string_view sid_field, std::string_view t_field) {
    const long long sid = csv.integer(sid_field, "subject_id");
    const auto it = sid < 0 ? slot.end() : slot.find(static_cast<std::uint64_t>(sid));
    if (it == slot.end()) csv.fail("subject_id " + std::string(sid_field) + " not listed in manifest 'subject_ids'");
    const long long t = csv.integer(t_field, "time_index");
    if (t < 0 || t >= times[it->second]) {
      csv.fail("time_index " + std::to_string(t) + " out of range for subject " + std::string(sid_field) +
               " (manifest 'times' = " + std::to_string(times[it->second]) + ")");
    }
    return std::pair{it->second, static_cast<size_t>(t)};
  };

  {
    CsvReader csv(path_in(dir, "responses.csv"));
    std::vector<std::string_view> f;
    if (!csv.next(f)) csv.fail("missing header");
    csv.expect_fields(f, 5);
    while (csv.next(f)) {
      csv.expect_fields(f, 5);
      const auto [k, t] = locate(csv, f[0], f[1]);
      const long long j = csv.integer(f[2], "row");
      const long long jp = csv.integer(f[3], "col");
      if (j < 0 || j >= n) csv.fail("row " + std::to_string(j) + " out of range for manifest field 'n' = " + std::to_string(n));
      if (jp < 0 || jp >= n) csv.fail("col " + std::to_string(jp) + " out of range for manifest field 'n' = " + std::to_string(n));
      if (!mask.include(static_cast<int>(j), static_cast<int>(jp))) {
        csv.fail("diagonal cell present but manifest 'diagonal_policy' is exclude");
      }
      char& mark = seen[k][t][static_cast<size_t>(jp * n + j)];
      if (mark) csv.fail("duplicate cell (" + std::to_string(j) + ", " + std::to_string(jp) + ")");
      mark = 1;
      data.subjects[k].responses[t](j, jp) = csv.number(f[4], "value");
    }
  }
  {
    CsvReader csv(path_in(dir, "covariates.csv"));
    std::vector<std::string_view> f;
    const auto width = static_cast<std::size_t>(data.p + 2);
    if (!csv.next(f)) csv.fail("missing header");
    if (f.size() != width) csv.fail("header has " + std::to_string(f.size()) + " fields; manifest field 'p' implies " + std::to_string(width));
    while (csv.next(f)) {
      csv.expect_fields(f, width);
      const auto [k, t] = locate(csv, f[0], f[1]);
      if (seen_x[k][t]) csv.fail("duplicate covariate row");
      seen_x[k][t] = 1;
      for (int l = 0; l < data.p; ++l) data.subjects[k].covariates[t](l) = csv.number(f[static_cast<size_t>(l + 2)], "x");
    }
  }

  for (size_t k = 0; k < data.subjects.size(); ++k) {
    for (size_t t = 0; t < seen[k].size(); ++t) {
      if (!seen_x[k][t]) {
        throw IoError(path_in(dir, "covariates.csv") + ": missing row for subject " +
                      std::to_string(data.subjects[k].id) + " time " + std::to_string(t));
      }
      for (int e : mask.entries()) {
        if (!seen[k][t][static_cast<size_t>(e)]) {
          throw IoError(path_in(dir, "responses.csv") + ": incomplete block for subject " +
                        std::to_string(data.subjects[k].id) + " time " + std::to_string(t) + " (missing cell " +
                        std::to_string(e % n) + ", " + std::to_string(e / n) + ")");
        }
      }
    }
  }
  try {
    data.validate(out.family);
  } catch (const InvalidArgument& ex) {
    throw IoError(dir + ": " + ex.what());
  }
  return out;
}

void write_params(const std::string& dir, const ModelParams& params, const std::string& prefix, const Stamp& stamp) {
  ensure_dir(dir);
  const bool symmetric = params.mode == FactorMode::symmetric;
  const bool v_equals_u = !symmetric && params.V == params.U;
  write_matrix(path_in(dir, prefix + "U.csv"), params.U, stamp);
  if (symmetric) {
    write_matrix(path_in(dir, prefix + "Lambda.csv"), params.Lambda.transpose(), stamp);
  } else if (!v_equals_u) {
    write_matrix(path_in(dir, prefix + "V.csv"), params.V, stamp);
  }
  if (params.Sigma_theta.size() != 0) write_matrix(path_in(dir, prefix + "Sigma_theta.csv"), params.Sigma_theta, stamp);

  const std::string bpath = path_in(dir, prefix + "B.csv");
  auto os = open_out(bpath);
  if (!stamp.empty()) os << stamp.comment() << '\n';
  os << "j,jprime,l,value\n";
  const CoefTensor& B = params.B;
  // Lexicographic (j, j', l) order.
  for (int j = 0; j < B.n(); ++j) {
    for (int jp = 0; jp < B.n(); ++jp) {
      for (int l = 0; l < B.p(); ++l) {
        const double v = B(j, jp, l);
        if (v != 0.0) os << j << ',' << jp << ',' << l << ',' << format_double(v) << '\n';
      }
    }
  }
  close_out(os, bpath);

  json meta;
  meta["version"] = 1;
  meta["mode"] = symmetric ? "symmetric" : "asymmetric";
  meta["n"] = params.n();
  meta["r"] = params.r();
  meta["p"] = params.p();
  meta["sigma_e2"] = params.sigma_e2;
  meta["v_equals_u"] = v_equals_u;
  meta["has_sigma_theta"] = params.Sigma_theta.size() != 0;
  if (!stamp.empty()) {
    meta["config_hash"] = stamp.config_hash;
    meta["seed"] = stamp.seed;
  }
  write_json(path_in(dir, prefix + (prefix.empty() ? "params.json" : "meta.json")), meta);
}

ModelParams read_params(const std::string& dir, const std::string& prefix) {
  const std::string mpath = path_in(dir, prefix + (prefix.empty() ? "params.json" : "meta.json"));
  const json meta = read_json(mpath);
  const std::string mode = manifest_field<std::string>(meta, mpath, "mode");
  const int n = manifest_field<int>(meta, mpath, "n");
  const int r = manifest_field<int>(meta, mpath, "r");
  const int p = manifest_field<int>(meta, mpath, "p");
  if (n < 1 || r < 1 || p < 0) throw IoError(mpath + ": fields 'n', 'r', 'p' out of range");
  if (mode != "asymmetric" && mode != "symmetric") throw IoError(mpath + ": field 'mode' must be asymmetric or symmetric");

  ModelParams params;
  params.mode = mode == "symmetric" ? FactorMode::symmetric : FactorMode::asymmetric;
  params.sigma_e2 = manifest_field<double>(meta, mpath, "sigma_e2");
  params.U = read_matrix(path_in(dir, prefix + "U.csv"), n, r);
  if (params.mode == FactorMode::symmetric) {
    params.Lambda = read_matrix(path_in(dir, prefix + "Lambda.csv"), 1, r).transpose();
  } else if (meta.value("v_equals_u", false)) {
    params.V = params.U;
  } else {
    params.V = read_matrix(path_in(dir, prefix + "V.csv"), n, r);
  }
  if (meta.value("has_sigma_theta", false)) {
    params.Sigma_theta = read_matrix(path_in(dir, prefix + "Sigma_theta.csv"), n, n);
  }

  params.B = CoefTensor(n, p);
  CsvReader csv(path_in(dir, prefix + "B.csv"));
  std::vector<std::string_view> f;
  if (!csv.next(f)) csv.fail("missing header");
  csv.expect_fields(f, 4);
  while (csv.next(f)) {
    csv.expect_fields(f, 4);
    const long long j = csv.integer(f[0], "j");
    const long long jp = csv.integer(f[1], "jprime");
    const long long l = csv.integer(f[2], "l");
    if (j < 0 || j >= n || jp < 0 || jp >= n) csv.fail("index out of range for field 'n' = " + std::to_string(n));
    if (l < 0 || l >= p) csv.fail("index l out of range for field 'p' = " + std::to_string(p));
    params.B(static_cast<int>(j), static_cast<int>(jp), static_cast<int>(l)) = csv.number(f[3], "value");
  }
  return params;
}

}  // namespace mrglmm::io
