#include <bit>
#include <cstring>
#include <fstream>

#include "clients.hpp"
#include "fedbio/problems.hpp"

namespace fedbio {
namespace {

static_assert(std::endian::native == std::endian::little,
              "the replay container stores native little-endian words");

constexpr char kMagic[5] = {'F', 'B', 'L', 'V', '1'};
constexpr std::uint64_t kMaxCount = std::uint64_t{1} << 40;

std::uint64_t lower_code(LowerLevel l) { return l == LowerLevel::Shared ? 0 : 1; }

}  // namespace

void BinaryWriter::u64(std::uint64_t v) { out_.write(reinterpret_cast<const char*>(&v), 8); }

void BinaryWriter::f64(double v) { out_.write(reinterpret_cast<const char*>(&v), 8); }

void BinaryWriter::str(const std::string& s) {
  u64(s.size());
  out_.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void BinaryWriter::vec(const Vector& v) {
  u64(static_cast<std::uint64_t>(v.size()));
  out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(8 * v.size()));
}

void BinaryWriter::mat(const Matrix& m) {
  u64(static_cast<std::uint64_t>(m.rows()));
  u64(static_cast<std::uint64_t>(m.cols()));
  out_.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(8 * m.size()));
}

void BinaryReader::read(char* dst, std::size_t n) {
  in_.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError("FBLV1: truncated stream");
}

std::uint64_t BinaryReader::u64() {
  std::uint64_t v = 0;
  read(reinterpret_cast<char*>(&v), 8);
  return v;
}

double BinaryReader::f64() {
  double v = 0;
  read(reinterpret_cast<char*>(&v), 8);
  return v;
}

std::string BinaryReader::str() {
  const std::uint64_t n = u64();
  if (n > kMaxCount) throw FormatError("FBLV1: string too long");
  std::string s(n, '\0');
  read(s.data(), n);
  return s;
}

Vector BinaryReader::vec() {
  const std::uint64_t n = u64();
  if (n > kMaxCount) throw FormatError("FBLV1: vector too long");
  Vector v(static_cast<Index>(n));
  read(reinterpret_cast<char*>(v.data()), 8 * n);
  return v;
}

Matrix BinaryReader::mat() {
  const std::uint64_t r = u64();
  const std::uint64_t c = u64();
  if (r > kMaxCount || c > kMaxCount || (c != 0 && r > kMaxCount / c)) {
    throw FormatError("FBLV1: matrix too large");
  }
  Matrix m(static_cast<Index>(r), static_cast<Index>(c));
  read(reinterpret_cast<char*>(m.data()), 8 * r * c);
  return m;
}

void write_problem_set(const ProblemSet& set, std::ostream& out) {
  out.write(kMagic, sizeof kMagic);
  BinaryWriter w(out);
  w.str(set.family);
  w.u64(lower_code(set.lower));
  w.f64(set.constants.mu);
  w.f64(set.constants.L);
  w.f64(set.constants.C_f);
  w.f64(set.constants.kappa);
  w.f64(set.constants.sigma);
  w.vec(set.x0);
  w.vec(set.y0);
  w.u64(set.clients.size());
  for (const auto& c : set.clients) {
    if (c->family() != set.family) throw std::invalid_argument("write_problem_set: mixed families");
    c->write(w);
  }
  if (!out) throw std::runtime_error("write_problem_set: stream error");
}

ProblemSet read_problem_set(std::istream& in) {
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (in.gcount() != sizeof magic || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw FormatError("FBLV1: bad magic");
  }
  BinaryReader r(in);
  ProblemSet set;
  set.family = r.str();
  const std::uint64_t lower = r.u64();
  if (lower > 1) throw FormatError("FBLV1: bad lower-level code");
  set.lower = lower == 0 ? LowerLevel::Shared : LowerLevel::Local;
  set.constants.mu = r.f64();
  set.constants.L = r.f64();
  set.constants.C_f = r.f64();
  set.constants.kappa = r.f64();
  set.constants.sigma = r.f64();
  set.x0 = r.vec();
  set.y0 = r.vec();
  const std::uint64_t m = r.u64();
  if (m == 0 || m > kMaxCount) throw FormatError("FBLV1: bad client count");
  ClientPtr (*reader)(BinaryReader&) = nullptr;
  if (set.family == "quadratic") {
    reader = detail::read_quadratic_client;
  } else if (set.family == "data_cleaning") {
    reader = detail::read_data_cleaning_client;
  } else if (set.family == "hyperrep") {
    reader = detail::read_hyperrep_client;
  } else {
    throw FormatError("FBLV1: unknown family '" + set.family + "'");
  }
  for (std::uint64_t i = 0; i < m; ++i) set.clients.push_back(reader(r));
  if (set.dim_x() != set.x0.size() || set.dim_y() != set.y0.size()) {
    throw FormatError("FBLV1: initial point does not match client dimensions");
  }
  return set;
}

void save_problem_set(const ProblemSet& set, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_problem_set(set, out);
}

ProblemSet load_problem_set(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return read_problem_set(in);
}

}  // namespace fedbio
