// SPDX-License-Identifier: Apache-2.0
#include "bmrnn/network.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "bmrnn/error.hpp"

namespace bmrnn {

BMRNNParams BMRNNParams::zeros(std::size_t input_dim, std::size_t hidden_dim,
                               std::size_t output_dim) {
  BMRNNParams p;
  p.fwd = SGRUParams::zeros(input_dim, hidden_dim);
  p.bwd = SGRUParams::zeros(input_dim, hidden_dim);
  p.merge_f = Matrix(output_dim, hidden_dim);
  p.merge_b = Matrix(output_dim, hidden_dim);
  p.b_merge = Vector(output_dim);
  return p;
}

BMRNNParams BMRNNParams::random(std::size_t input_dim, std::size_t hidden_dim,
                                std::size_t output_dim, SeededRng& rng) {
  BMRNNParams p;
  p.fwd = SGRUParams::random(input_dim, hidden_dim, rng);
  p.bwd = SGRUParams::random(input_dim, hidden_dim, rng);
  p.merge_f = init_params(output_dim, hidden_dim, rng);
  p.merge_b = init_params(output_dim, hidden_dim, rng);
  p.b_merge = Vector(output_dim);
  return p;
}

void BMRNNParams::validate() const {
  fwd.validate();
  bwd.validate();
  if (fwd.input_dim() != bwd.input_dim() || fwd.hidden_dim() != bwd.hidden_dim()) {
    throw DimensionError("bmrnn: forward and backward passes disagree on dims");
  }
  if (merge_f.cols() != hidden_dim() || merge_b.cols() != hidden_dim() ||
      merge_f.rows() != merge_b.rows() || b_merge.dim() != merge_f.rows()) {
    throw DimensionError("bmrnn: merge layer shapes " + merge_f.shape_string() + ", " +
                         merge_b.shape_string() + ", bias " + std::to_string(b_merge.dim()) +
                         " inconsistent with hidden dim " + std::to_string(hidden_dim()));
  }
}

namespace {

void check_story(const BMRNNParams& params, const std::vector<Vector>& x,
                 const SkipMatrix& skips) {
  if (x.empty()) throw DimensionError("bmrnn: empty story");
  if (skips.n() != x.size()) {
    throw DimensionError("bmrnn: skip matrix covers " + std::to_string(skips.n()) +
                         " steps but the story has " + std::to_string(x.size()));
  }
  if (skips.reversed()) throw DimensionError("bmrnn: expected a forward skip matrix");
  for (const auto& v : x) {
    if (v.dim() != params.input_dim()) {
      throw DimensionError("bmrnn: input dim " + std::to_string(v.dim()) + ", model expects " +
                           std::to_string(params.input_dim()));
    }
  }
}

}  // namespace

ForwardTrace bmrnn_forward(const BMRNNParams& params, const std::vector<Vector>& x,
                           const SkipMatrix& skips) {
  check_story(params, x, skips);
  const std::size_t n = x.size();
  const Vector zero(params.hidden_dim());
  const SkipMatrix back_skips = transpose_skips(skips);

  ForwardTrace tr;
  tr.fwd.reserve(n);
  for (std::size_t t = 0; t < n; ++t) {
    const Vector& h_prev = t == 0 ? zero : tr.fwd[t - 1].hidden;
    const auto anc = skips.ancestor_of(t);
    tr.fwd.push_back(sgru_forward(params.fwd, x[t], h_prev, anc ? &tr.fwd[*anc].hidden : nullptr));
  }

  // Backward sweep visits t = n-1 .. 0; a step's ancestor lies in its future.
  tr.bwd.resize(n);
  for (std::size_t k = n; k-- > 0;) {
    const Vector& h_prev = k + 1 == n ? zero : tr.bwd[k + 1].hidden;
    const auto anc = back_skips.ancestor_of(k);
    tr.bwd[k] = sgru_forward(params.bwd, x[k], h_prev, anc ? &tr.bwd[*anc].hidden : nullptr);
  }

  tr.merged.reserve(n);
  for (std::size_t t = 0; t < n; ++t) {
    Vector h = matvec(params.merge_f, tr.fwd[t].hidden);
    h += matvec(params.merge_b, tr.bwd[t].hidden);
    h += params.b_merge;
    tr.merged.push_back(std::move(h));
  }
  return tr;
}

std::vector<Vector> bmrnn_backward_accumulate(const BMRNNParams& params,
                                              const std::vector<Vector>& x,
                                              const SkipMatrix& skips,
                                              const ForwardTrace& trace,
                                              const std::vector<Vector>& dH,
                                              BMRNNParams& grads) {
  check_story(params, x, skips);
  const std::size_t n = x.size();
  if (dH.size() != n || trace.fwd.size() != n || trace.bwd.size() != n) {
    throw DimensionError("bmrnn_backward: trace/gradient length does not match story length " +
                         std::to_string(n));
  }
  const std::size_t hid = params.hidden_dim();
  const Vector zero(hid);
  const SkipMatrix back_skips = transpose_skips(skips);

  std::vector<Vector> d_fwd(n), d_bwd(n);
  for (std::size_t t = 0; t < n; ++t) {
    if (dH[t].dim() != params.output_dim()) {
      throw DimensionError("bmrnn_backward: dH dim " + std::to_string(dH[t].dim()) +
                           " vs output dim " + std::to_string(params.output_dim()));
    }
    add_outer(grads.merge_f, dH[t], trace.fwd[t].hidden);
    add_outer(grads.merge_b, dH[t], trace.bwd[t].hidden);
    grads.b_merge += dH[t];
    d_fwd[t] = matvec_transposed(params.merge_f, dH[t]);
    d_bwd[t] = matvec_transposed(params.merge_b, dH[t]);
  }

  std::vector<Vector> dx(n, Vector(params.input_dim()));

  // Forward sweep in reverse: skip descendants (later) are handled before
  // their ancestors, so each skip edge delivers its gradient exactly once.
  for (std::size_t t = n; t-- > 0;) {
    const Vector& h_prev = t == 0 ? zero : trace.fwd[t - 1].hidden;
    const auto anc = skips.ancestor_of(t);
    const Vector* h_skip = anc ? &trace.fwd[*anc].hidden : nullptr;
    auto g = sgru_backward_accumulate(params.fwd, x[t], h_prev, h_skip, trace.fwd[t], d_fwd[t],
                                      grads.fwd);
    dx[t] += g.dx;
    if (t > 0) d_fwd[t - 1] += g.dh_prev;
    if (anc) d_fwd[*anc] += g.dh_skip;
  }

  // Backward sweep in reverse visitation order (t = 0 .. n-1).
  for (std::size_t t = 0; t < n; ++t) {
    const Vector& h_prev = t + 1 == n ? zero : trace.bwd[t + 1].hidden;
    const auto anc = back_skips.ancestor_of(t);
    const Vector* h_skip = anc ? &trace.bwd[*anc].hidden : nullptr;
    auto g = sgru_backward_accumulate(params.bwd, x[t], h_prev, h_skip, trace.bwd[t], d_bwd[t],
                                      grads.bwd);
    dx[t] += g.dx;
    if (t + 1 < n) d_bwd[t + 1] += g.dh_prev;
    if (anc) d_bwd[*anc] += g.dh_skip;
  }
  return dx;
}

NetworkGradients bmrnn_backward(const BMRNNParams& params, const std::vector<Vector>& x,
                                const SkipMatrix& skips, const ForwardTrace& trace,
                                const std::vector<Vector>& dH) {
  NetworkGradients out;
  out.dparams = BMRNNParams::zeros(params.input_dim(), params.hidden_dim(), params.output_dim());
  out.dx = bmrnn_backward_accumulate(params, x, skips, trace, dH, out.dparams);
  return out;
}

// --- serialization ---------------------------------------------------------

namespace {

static_assert(std::numeric_limits<float>::is_iec559);

template <class T>
void put_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint32_t>;
  U bits;
  std::memcpy(&bits, &value, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

  template <class T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint32_t>;
    need(sizeof(T));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bits |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, &bits, sizeof(T));
    return value;
  }

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

  [[noreturn]] void fail(const std::string& what) const {
    throw DataError(origin_ + ": " + what);
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail("truncated model file at byte " + std::to_string(pos_));
  }

  const std::string& bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

struct RawTensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

}  // namespace

std::string serialize_model(const BMRNNParams& params) {
  params.validate();
  std::string out = "BMRN";
  put_le<std::uint16_t>(out, kModelFormatVersion);
  std::uint32_t count = 0;
  for_each_tensor(params, [&](const std::string&, const auto&) { ++count; });
  put_le<std::uint32_t>(out, count);
  for_each_tensor(params, [&](const std::string& name, const auto& t) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    if constexpr (std::is_same_v<std::decay_t<decltype(t)>, Matrix>) {
      put_le<std::uint32_t>(out, 2);
      put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rows()));
      put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.cols()));
    } else {
      put_le<std::uint32_t>(out, 1);
      put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
    }
    for (double v : t.values()) put_le<float>(out, static_cast<float>(v));
  });
  return out;
}

BMRNNParams deserialize_model(const std::string& bytes, const std::string& origin) {
  Reader in(bytes, origin);
  if (in.get_bytes(4) != "BMRN") in.fail("bad magic, expected \"BMRN\"");
  const auto version = in.get<std::uint16_t>();
  if (version != kModelFormatVersion) in.fail("unsupported model format version " + std::to_string(version));
  const auto count = in.get<std::uint32_t>();

  std::map<std::string, RawTensor> tensors;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = in.get<std::uint32_t>();
    std::string name = in.get_bytes(name_len);
    RawTensor t;
    const auto rank = in.get<std::uint32_t>();
    if (rank > 2) in.fail("tensor " + name + " has unsupported rank " + std::to_string(rank));
    std::size_t total = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.dims.push_back(in.get<std::uint32_t>());
      total *= t.dims.back();
    }
    t.data.reserve(total);
    for (std::size_t i = 0; i < total; ++i) t.data.push_back(in.get<float>());
    if (!tensors.emplace(name, std::move(t)).second) in.fail("duplicate tensor " + name);
  }
  if (!in.at_end()) in.fail("trailing bytes after tensor list");

  BMRNNParams params;
  for_each_tensor(params, [&](const std::string& name, auto& t) {
    auto it = tensors.find(name);
    if (it == tensors.end()) in.fail("missing tensor " + name);
    const RawTensor& raw = it->second;
    if constexpr (std::is_same_v<std::decay_t<decltype(t)>, Matrix>) {
      if (raw.dims.size() != 2) in.fail("tensor " + name + " must be rank 2");
      t = Matrix(raw.dims[0], raw.dims[1]);
    } else {
      if (raw.dims.size() != 1) in.fail("tensor " + name + " must be rank 1");
      t = Vector(raw.dims[0]);
    }
    auto dst = t.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = raw.data[i];
    tensors.erase(it);
  });
  if (!tensors.empty()) in.fail("unexpected tensor " + tensors.begin()->first);
  try {
    params.validate();
  } catch (const DimensionError& e) {
    in.fail(e.what());
  }
  return params;
}

void save_model(const std::filesystem::path& path, const BMRNNParams& params) {
  const std::string bytes = serialize_model(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

BMRNNParams load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open model file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_model(buf.str(), path.string());
}

BMRNNParams round_to_float32(const BMRNNParams& params) {
  BMRNNParams out = params;
  for_each_tensor(out, [](const std::string&, auto& t) {
    for (double& v : t.values()) v = static_cast<float>(v);
  });
  return out;
}

}  // namespace bmrnn
