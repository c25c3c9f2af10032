#pragma once

// GSEL binary container.
//
// All integers and reals are little-endian; matrices are stored row-major as
// f64. Layout:
//
//   char[4]  magic "GSEL"
//   u32      version (1)
//   u32      L       number of layers (0 when not applicable)
//   u32      k1      uniform first dimension, or 0 if a per-layer table follows
//   u32      k2      uniform second dimension
//   u32      T       token count
//   u32      kind    payload kind
//   u64      count   number of records
//   [k1 == 0 && L > 0: L x (u32 layer_id, u32 k1_l, u32 k2_l)]
//   records
//
// When k1 != 0 every layer has dims (k1, k2) and layer ids are 0..L-1.
//
// Projected batch record: i64 sample_id, then per layer a (k1_l x T) and
// g (k2_l x T).

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "gradsel/gradcore.hpp"

namespace gradsel::container {

inline constexpr char kMagic[4] = {'G', 'S', 'E', 'L'};
inline constexpr std::uint32_t kVersion = 1;

enum class PayloadKind : std::uint32_t {
  projected_batch = 1,
  optimizer_checkpoint = 2,
  corpus = 3,
};

struct Header {
  std::uint32_t version = kVersion;
  std::uint32_t L = 0;
  std::uint32_t k1 = 0;
  std::uint32_t k2 = 0;
  std::uint32_t T = 0;
  PayloadKind kind = PayloadKind::projected_batch;
  std::uint64_t count = 0;
  std::vector<gradcore::LayerShape> layers;  // per-layer dims (always filled on read)
};

void write_header(std::ostream& out, const Header& h);
Header read_header(std::istream& in);

void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_i64(std::ostream& out, std::int64_t v);
void write_f64(std::ostream& out, double v);
void write_matrix(std::ostream& out, const gradcore::Matrix& m);

std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
std::int64_t read_i64(std::istream& in);
double read_f64(std::istream& in);
gradcore::Matrix read_matrix(std::istream& in, gradcore::Index rows,
                             gradcore::Index cols);

void dump_projected(std::ostream& out, std::span<const gradcore::ProjectedSample> batch);
std::vector<gradcore::ProjectedSample> load_projected(std::istream& in);

void dump_projected_file(const std::string& path,
                         std::span<const gradcore::ProjectedSample> batch);
std::vector<gradcore::ProjectedSample> load_projected_file(const std::string& path);

}  // namespace gradsel::container
