#include "cfl/param_set.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "cfl/errors.hpp"

namespace cfl {

namespace {

constexpr char kMagic[4] = {'C', 'F', 'L', 'P'};
constexpr std::uint32_t kVersion = 1;

void check_same_structure(const ParamSet& a, const ParamSet& b, const char* what) {
  if (a.size() != b.size()) {
    throw StructuralError(std::string(what) + ": entry counts differ (" + std::to_string(a.size()) +
                          " vs " + std::to_string(b.size()) + ")");
  }
  auto ia = a.begin();
  auto ib = b.begin();
  for (; ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first) {
      throw StructuralError(std::string(what) + ": key mismatch '" + ia->first + "' vs '" + ib->first + "'");
    }
    if (!ia->second.same_shape(ib->second)) {
      throw StructuralError(std::string(what) + ": shape mismatch for '" + ia->first + "' " +
                            ia->second.shape_str() + " vs " + ib->second.shape_str());
    }
  }
}

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const std::string& context) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("truncated parameter data: " + context);
  return v;
}

}  // namespace

ParamSet sgd_step(const ParamSet& params, const ParamSet& grads, double lr) {
  ParamSet out = params;
  sgd_step_inplace(out, grads, lr);
  return out;
}

void sgd_step_inplace(ParamSet& params, const ParamSet& grads, double lr) {
  check_same_structure(params, grads, "sgd_step");
  auto ip = params.begin();
  auto ig = grads.begin();
  for (; ip != params.end(); ++ip, ++ig) {
    double* p = ip->second.data();
    const double* g = ig->second.data();
    const std::size_t n = ip->second.size();
    for (std::size_t i = 0; i < n; ++i) p[i] -= lr * g[i];
  }
}

std::size_t total_parameters(const ParamSet& params) {
  std::size_t n = 0;
  for (const auto& [id, t] : params) n += t.size();
  return n;
}

double max_abs_diff(const ParamSet& a, const ParamSet& b) {
  check_same_structure(a, b, "max_abs_diff");
  double m = 0.0;
  auto ia = a.begin();
  auto ib = b.begin();
  for (; ia != a.end(); ++ia, ++ib) {
    const double* x = ia->second.data();
    const double* y = ib->second.data();
    for (std::size_t i = 0; i < ia->second.size(); ++i) {
      m = std::max(m, std::fabs(x[i] - y[i]));
    }
  }
  return m;
}

void write_param_set(const ParamSet& params, std::ostream& os, const std::string& context) {
  os.write(kMagic, 4);
  write_pod(os, kVersion);
  write_pod(os, static_cast<std::uint64_t>(params.size()));
  for (const auto& [id, t] : params) {
    write_pod(os, static_cast<std::uint32_t>(id.size()));
    os.write(id.data(), static_cast<std::streamsize>(id.size()));
    write_pod(os, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) write_pod(os, static_cast<std::uint64_t>(t.dim(i)));
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw IoError("write failed: " + context);
}

ParamSet read_param_set(std::istream& is, const std::string& context) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError("bad magic in parameter data: " + context);
  const auto version = read_pod<std::uint32_t>(is, context);
  if (version != kVersion) throw IoError("unsupported parameter format version " + std::to_string(version));
  const auto count = read_pod<std::uint64_t>(is, context);
  ParamSet out;
  for (std::uint64_t e = 0; e < count; ++e) {
    const auto id_len = read_pod<std::uint32_t>(is, context);
    std::string id(id_len, '\0');
    is.read(id.data(), id_len);
    if (!is) throw IoError("truncated parameter data: " + context);
    const auto rank = read_pod<std::uint32_t>(is, context);
    std::vector<int> shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int>(read_pod<std::uint64_t>(is, context));
    std::vector<double> data(shape_product(shape));
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw IoError("truncated parameter data: " + context);
    Tensor t(shape, std::move(data));
    if (!t.all_finite()) throw IoError("non-finite value in parameter '" + id + "' of " + context);
    if (!out.emplace(std::move(id), std::move(t)).second) {
      throw IoError("duplicate parameter id in " + context);
    }
  }
  return out;
}

void save_param_set(const ParamSet& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  write_param_set(params, os, path);
}

ParamSet load_param_set(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  return read_param_set(is, path);
}

}  // namespace cfl
