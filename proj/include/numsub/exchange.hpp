#pragma once

// Files shared with an external encoder adapter: labeled activation dumps
// and per-sentence copula probability records.
//
// NACT: "NACT", u16 version, u32 d, u32 n, i32 layer, u8 position role,
//       n label bytes (0 = singular, 1 = plural), n*d f64 little-endian rows.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "numsub/binary_io.hpp"
#include "numsub/probe.hpp"

namespace numsub {

inline constexpr std::uint16_t kActivationFormatVersion = 1;

inline void write_activations(std::ostream& out, const LabeledVectorSet& data) {
  data.validate();
  io::write_magic(out, "NACT");
  io::write_le<std::uint16_t>(out, kActivationFormatVersion);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(data.dim()));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(data.size()));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(static_cast<std::int32_t>(data.provenance.layer)));
  io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(data.provenance.role));
  for (Number n : data.labels) io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(n));
  for (Eigen::Index i = 0; i < data.vectors.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.vectors.cols(); ++j) io::write_f64(out, data.vectors(i, j));
  }
}

inline LabeledVectorSet read_activations(std::istream& in) {
  io::expect_magic(in, "NACT");
  const auto version = io::read_le<std::uint16_t>(in);
  if (version != kActivationFormatVersion) {
    throw Error("unsupported NACT version " + std::to_string(version));
  }
  const auto d = io::read_le<std::uint32_t>(in);
  const auto n = io::read_le<std::uint32_t>(in);
  const auto layer = static_cast<std::int32_t>(io::read_le<std::uint32_t>(in));
  const auto role = io::read_le<std::uint8_t>(in);
  if (d == 0 || role > 2) throw Error("corrupt NACT header");
  LabeledVectorSet out;
  out.provenance = {layer, static_cast<PositionRole>(role)};
  out.labels.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto label = io::read_le<std::uint8_t>(in);
    if (label > 1) throw Error("corrupt NACT label");
    out.labels.push_back(static_cast<Number>(label));
  }
  out.vectors.resize(n, d);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t j = 0; j < d; ++j) out.vectors(i, j) = io::read_f64(in);
  }
  if (!out.vectors.allFinite()) throw Error("NACT file contains non-finite values");
  return out;
}

inline void save_activations(const std::filesystem::path& path, const LabeledVectorSet& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  write_activations(out, data);
}

inline LabeledVectorSet load_activations(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return read_activations(in);
}

// ------------------------------------------------------ probability records

struct ProbabilityRecord {
  int sentence_index = 0;
  Number subject_number = Number::Singular;
  double p_is = 0.0;
  double p_are = 0.0;
};

inline constexpr std::string_view kProbabilityHeader = "sentence_index,subject_number,p_is,p_are";

inline void write_probabilities(std::ostream& out, const std::vector<ProbabilityRecord>& records) {
  out << kProbabilityHeader << '\n';
  out.precision(17);
  for (const auto& r : records) {
    out << r.sentence_index << ',' << to_string(r.subject_number) << ',' << r.p_is << ',' << r.p_are << '\n';
  }
}

inline std::vector<ProbabilityRecord> read_probabilities(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kProbabilityHeader) {
    throw Error("probability records: unexpected header");
  }
  std::vector<ProbabilityRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string idx, num, p_is, p_are;
    if (!std::getline(fields, idx, ',') || !std::getline(fields, num, ',') ||
        !std::getline(fields, p_is, ',') || !std::getline(fields, p_are)) {
      throw Error("probability records: malformed row: " + line);
    }
    ProbabilityRecord r{std::stoi(idx), parse_number(num), std::stod(p_is), std::stod(p_are)};
    if (!std::isfinite(r.p_is) || !std::isfinite(r.p_are)) {
      throw Error("probability records: non-finite probability");
    }
    out.push_back(r);
  }
  return out;
}

inline std::vector<ProbabilityRecord> load_probabilities(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return read_probabilities(in);
}

/// Conjugation accuracy of a record set: singular predicted iff p_is > p_are.
inline double score_probabilities(const std::vector<ProbabilityRecord>& records) {
  if (records.empty()) throw Error("score_probabilities: no records");
  std::size_t correct = 0;
  for (const auto& r : records) {
    const Number predicted = r.p_is > r.p_are ? Number::Singular : Number::Plural;
    correct += predicted == r.subject_number;
  }
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

}  // namespace numsub
