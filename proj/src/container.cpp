#include "gradsel/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "gradsel/errors.hpp"

namespace gradsel::container {

namespace {

static_assert(std::endian::native == std::endian::little ||
                  std::endian::native == std::endian::big,
              "mixed-endian platforms are not supported");

template <typename T>
void put(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
  }
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!in) throw Error("GSEL: unexpected end of stream");
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
  }
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

bool uniform_layout(const std::vector<gradcore::LayerShape>& layers) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].layer_id != static_cast<int>(l) || layers[l].d1 != layers[0].d1 ||
        layers[l].d2 != layers[0].d2) {
      return false;
    }
  }
  return true;
}

}  // namespace

void write_u32(std::ostream& out, std::uint32_t v) { put(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { put(out, v); }
void write_i64(std::ostream& out, std::int64_t v) { put(out, v); }
void write_f64(std::ostream& out, double v) { put(out, v); }
std::uint32_t read_u32(std::istream& in) { return get<std::uint32_t>(in); }
std::uint64_t read_u64(std::istream& in) { return get<std::uint64_t>(in); }
std::int64_t read_i64(std::istream& in) { return get<std::int64_t>(in); }
double read_f64(std::istream& in) { return get<double>(in); }

void write_matrix(std::ostream& out, const gradcore::Matrix& m) {
  for (gradcore::Index i = 0; i < m.rows(); ++i) {
    for (gradcore::Index j = 0; j < m.cols(); ++j) put(out, m(i, j));
  }
}

gradcore::Matrix read_matrix(std::istream& in, gradcore::Index rows,
                             gradcore::Index cols) {
  gradcore::Matrix m(rows, cols);
  for (gradcore::Index i = 0; i < rows; ++i) {
    for (gradcore::Index j = 0; j < cols; ++j) m(i, j) = get<double>(in);
  }
  return m;
}

void write_header(std::ostream& out, const Header& h) {
  out.write(kMagic, 4);
  put(out, h.version);
  put(out, static_cast<std::uint32_t>(h.layers.size()));
  const bool uniform = uniform_layout(h.layers);
  if (!h.layers.empty() && uniform) {
    put(out, static_cast<std::uint32_t>(h.layers[0].d1));
    put(out, static_cast<std::uint32_t>(h.layers[0].d2));
  } else if (h.layers.empty()) {
    put(out, h.k1);
    put(out, h.k2);
  } else {
    put(out, std::uint32_t{0});
    put(out, std::uint32_t{0});
  }
  put(out, h.T);
  put(out, static_cast<std::uint32_t>(h.kind));
  put(out, h.count);
  if (!h.layers.empty() && !uniform) {
    for (const auto& s : h.layers) {
      put(out, static_cast<std::uint32_t>(s.layer_id));
      put(out, static_cast<std::uint32_t>(s.d1));
      put(out, static_cast<std::uint32_t>(s.d2));
    }
  }
}

Header read_header(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw Error("GSEL: bad magic");
  Header h;
  h.version = get<std::uint32_t>(in);
  if (h.version != kVersion) {
    throw Error("GSEL: unsupported version " + std::to_string(h.version));
  }
  h.L = get<std::uint32_t>(in);
  h.k1 = get<std::uint32_t>(in);
  h.k2 = get<std::uint32_t>(in);
  h.T = get<std::uint32_t>(in);
  h.kind = static_cast<PayloadKind>(get<std::uint32_t>(in));
  h.count = get<std::uint64_t>(in);
  if (h.L > 0 && h.k1 == 0) {
    for (std::uint32_t l = 0; l < h.L; ++l) {
      gradcore::LayerShape s;
      s.layer_id = static_cast<int>(get<std::uint32_t>(in));
      s.d1 = get<std::uint32_t>(in);
      s.d2 = get<std::uint32_t>(in);
      h.layers.push_back(s);
    }
  } else {
    for (std::uint32_t l = 0; l < h.L; ++l) {
      h.layers.push_back({static_cast<int>(l), h.k1, h.k2});
    }
  }
  return h;
}

void dump_projected(std::ostream& out, std::span<const gradcore::ProjectedSample> batch) {
  Header h;
  h.kind = PayloadKind::projected_batch;
  h.count = batch.size();
  if (!batch.empty()) {
    const auto& first = batch.front();
    h.T = first.layers.empty() ? 0 : static_cast<std::uint32_t>(first.layers[0].tokens());
    for (const auto& fp : first.layers) {
      h.layers.push_back({fp.layer_id, fp.input_dim(), fp.output_dim()});
    }
  }
  for (const auto& s : batch) {
    if (s.layers.size() != h.layers.size()) throw ShapeError("GSEL: non-uniform layer count");
    for (std::size_t l = 0; l < s.layers.size(); ++l) {
      const auto& fp = s.layers[l];
      if (fp.layer_id != h.layers[l].layer_id || fp.input_dim() != h.layers[l].d1 ||
          fp.output_dim() != h.layers[l].d2 || fp.tokens() != h.T ||
          fp.out_grads.cols() != h.T) {
        throw ShapeError("GSEL: batch is not uniform in layer " +
                         std::to_string(fp.layer_id));
      }
    }
  }
  write_header(out, h);
  for (const auto& s : batch) {
    put(out, static_cast<std::int64_t>(s.sample_id));
    for (const auto& fp : s.layers) {
      write_matrix(out, fp.activations);
      write_matrix(out, fp.out_grads);
    }
  }
}

std::vector<gradcore::ProjectedSample> load_projected(std::istream& in) {
  const Header h = read_header(in);
  if (h.kind != PayloadKind::projected_batch) {
    throw Error("GSEL: payload is not a projected batch");
  }
  std::vector<gradcore::ProjectedSample> out;
  out.reserve(h.count);
  for (std::uint64_t i = 0; i < h.count; ++i) {
    gradcore::ProjectedSample s;
    s.sample_id = get<std::int64_t>(in);
    for (const auto& shape : h.layers) {
      gradcore::FactorPair fp;
      fp.layer_id = shape.layer_id;
      fp.activations = read_matrix(in, shape.d1, h.T);
      fp.out_grads = read_matrix(in, shape.d2, h.T);
      s.layers.push_back(std::move(fp));
    }
    out.push_back(std::move(s));
  }
  return out;
}

void dump_projected_file(const std::string& path,
                         std::span<const gradcore::ProjectedSample> batch) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  dump_projected(out, batch);
}

std::vector<gradcore::ProjectedSample> load_projected_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return load_projected(in);
}

}  // namespace gradsel::container
