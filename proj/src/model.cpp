#include "dael/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "dael/errors.hpp"
#include "dael/rng.hpp"

namespace dael {

void Architecture::validate() const {
  if (image_side < 8 || image_side % 8 != 0)
    throw ContractError("Architecture: image_side must be a positive multiple of 8");
  for (const int w : widths)
    if (w < 1) throw ContractError("Architecture: channel widths must be positive");
  if (feature_dim < 1) throw ContractError("Architecture: feature_dim must be positive");
  if (num_experts < 1) throw ContractError("Architecture: need at least one expert");
  if (num_classes < 2) throw ContractError("Architecture: need at least two classes");
}

std::size_t Architecture::flat_dim() const {
  const auto s = static_cast<std::size_t>(image_side / 8);
  return s * s * static_cast<std::size_t>(widths[2]);
}

template <typename T>
std::vector<Tensor<T>> ModelParams<T>::all() const {
  std::vector<Tensor<T>> out;
  for (int l = 0; l < 3; ++l) {
    out.push_back(conv_w[l]);
    out.push_back(conv_b[l]);
  }
  out.push_back(fc_w);
  out.push_back(fc_b);
  for (std::size_t i = 0; i < head_w.size(); ++i) {
    out.push_back(head_w[i]);
    out.push_back(head_b[i]);
  }
  return out;
}

template <typename T>
std::vector<std::string> ModelParams<T>::names() const {
  std::vector<std::string> out;
  for (int l = 1; l <= 3; ++l) {
    out.push_back("conv" + std::to_string(l) + ".weight");
    out.push_back("conv" + std::to_string(l) + ".bias");
  }
  out.push_back("fc.weight");
  out.push_back("fc.bias");
  for (std::size_t i = 0; i < head_w.size(); ++i) {
    out.push_back("head" + std::to_string(i) + ".weight");
    out.push_back("head" + std::to_string(i) + ".bias");
  }
  return out;
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : all()) n += t.numel();
  return n;
}

template <typename T>
void ModelParams<T>::zero_grad() {
  for (auto& t : all()) t.zero_grad();
}

template <typename T>
ModelParams<T> init_params(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(seed);
  auto he = [&rng](Shape shape, std::size_t fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>::parameter(std::move(shape), std::move(v));
  };
  auto zeros = [](std::size_t n) { return Tensor<T>::parameter({n}, std::vector<T>(n, T(0))); };

  ModelParams<T> p;
  p.arch = arch;
  std::size_t in = 3;
  for (int l = 0; l < 3; ++l) {
    const auto out = static_cast<std::size_t>(arch.widths[l]);
    p.conv_w[l] = he({out, in, 3, 3}, in * 9);
    p.conv_b[l] = zeros(out);
    in = out;
  }
  const auto d = static_cast<std::size_t>(arch.feature_dim);
  const auto c = static_cast<std::size_t>(arch.num_classes);
  p.fc_w = he({arch.flat_dim(), d}, arch.flat_dim());
  p.fc_b = zeros(d);
  for (int i = 0; i < arch.num_experts; ++i) {
    p.head_w.push_back(he({d, c}, d));
    p.head_b.push_back(zeros(c));
  }
  return p;
}

template <typename T>
Tensor<T> backbone(const ModelParams<T>& p, const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != static_cast<std::size_t>(p.arch.image_side) ||
      x.dim(3) != static_cast<std::size_t>(p.arch.image_side))
    throw DimensionError("backbone: expected B x 3 x " + std::to_string(p.arch.image_side) +
                         " x " + std::to_string(p.arch.image_side) + " input, got " +
                         shape_str(x.shape()));
  Tensor<T> h = x;
  for (int l = 0; l < 3; ++l) h = maxpool2x2(relu(conv2d(h, p.conv_w[l], p.conv_b[l], 1, 1)));
  h = reshape(h, {x.dim(0), p.arch.flat_dim()});
  return relu(add(matmul(h, p.fc_w), p.fc_b));
}

template <typename T>
Tensor<T> head_probs(const ModelParams<T>& p, int expert, const Tensor<T>& features) {
  if (expert < 0 || expert >= p.num_experts())
    throw ContractError("expert index " + std::to_string(expert) + " outside [0, " +
                        std::to_string(p.num_experts()) + ")");
  const auto i = static_cast<std::size_t>(expert);
  return softmax_lastdim(add(matmul(features, p.head_w[i]), p.head_b[i]));
}

template <typename T>
Tensor<T> expert_forward(const ModelParams<T>& p, int expert, const Tensor<T>& x) {
  if (expert < 0 || expert >= p.num_experts())
    throw ContractError("expert index " + std::to_string(expert) + " outside [0, " +
                        std::to_string(p.num_experts()) + ")");
  return head_probs(p, expert, backbone(p, x));
}

template <typename T>
Tensor<T> average(std::span<const Tensor<T>> probs) {
  if (probs.empty()) throw ContractError("average: empty expert subset");
  if (probs.size() == 1) return probs[0];
  Tensor<T> acc = probs[0];
  for (std::size_t i = 1; i < probs.size(); ++i) acc = add(acc, probs[i]);
  return scale(acc, T(1) / static_cast<T>(probs.size()));
}

template <typename T>
Tensor<T> ensemble_from_features(const ModelParams<T>& p, const Tensor<T>& features,
                                 std::span<const int> subset) {
  if (subset.empty()) throw ContractError("ensemble: empty expert subset");
  std::vector<Tensor<T>> probs;
  for (const int i : subset) probs.push_back(head_probs(p, i, features));
  return average<T>(probs);
}

template <typename T>
Tensor<T> ensemble_predict(const ModelParams<T>& p, const Tensor<T>& x,
                           std::span<const int> subset) {
  if (subset.empty()) throw ContractError("ensemble: empty expert subset");
  return ensemble_from_features(p, backbone(p, x), subset);
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& probs) {
  if (probs.rank() != 2) throw DimensionError("argmax_rows: expected a matrix");
  const auto rows = probs.dim(0), cols = probs.dim(1);
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (probs[r * cols + c] > probs[r * cols + best]) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> all_experts(int k) {
  std::vector<int> out(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) out[static_cast<std::size_t>(i)] = i;
  return out;
}

template <typename T>
std::vector<int> predict_class(const ModelParams<T>& p, const Tensor<T>& x) {
  NoGradGuard no_grad;
  const auto experts = all_experts(p.num_experts());
  return argmax_rows(ensemble_predict(p, x, std::span<const int>(experts)));
}

// ---- checkpoint ------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[8] = {'D', 'A', 'E', 'L', 'C', 'K', '1', '\0'};

template <typename U>
void put_le(std::string& buf, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i)
    buf.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

struct CheckpointReader {
  std::string data;
  std::string what;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& msg, std::size_t at) const {
    std::ostringstream os;
    os << what << ": " << msg << " at offset " << at;
    throw FormatError(os.str());
  }
  template <typename U>
  U get(const char* field) {
    if (pos + sizeof(U) > data.size()) fail(std::string("truncated file while reading ") + field, pos);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[pos + i])) << (8 * i);
    pos += sizeof(U);
    return static_cast<U>(v);
  }
};

}  // namespace

void save_checkpoint(const ModelParams<float>& p, const std::filesystem::path& path) {
  std::string buf(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(p.num_experts()));
  put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(p.num_classes()));
  const auto tensors = p.all();
  const auto names = p.names();
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(names[t].size()));
    buf += names[t];
    put_le<std::uint8_t>(buf, static_cast<std::uint8_t>(tensors[t].rank()));
    for (const auto d : tensors[t].shape()) put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(d));
    for (const float v : tensors[t].values()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      put_le<std::uint32_t>(buf, bits);
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

ModelParams<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  CheckpointReader r{ss.str(), path.string()};
  if (r.data.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(r.data.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    r.fail("bad magic (expected DAELCK1)", 0);
  r.pos = sizeof(kCheckpointMagic);
  const int k = r.get<std::uint16_t>("num_experts");
  const int c = r.get<std::uint16_t>("num_classes");
  if (k < 1 || c < 2) r.fail("invalid expert or class count", 8);

  ModelParams<float> shape_only;
  shape_only.head_w.resize(static_cast<std::size_t>(k));
  const auto expected = shape_only.names();
  std::vector<Tensor<float>> loaded;
  for (const auto& name : expected) {
    const auto at = r.pos;
    const auto len = r.get<std::uint16_t>("name length");
    if (r.pos + len > r.data.size()) r.fail("truncated file while reading name", r.pos);
    const std::string got = r.data.substr(r.pos, len);
    r.pos += len;
    if (got != name) r.fail("expected array '" + name + "', found '" + got + "'", at);
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape;
    for (int i = 0; i < rank; ++i) shape.push_back(r.get<std::uint32_t>("dimension"));
    if (numel(shape) > (r.data.size() - r.pos) / 4)
      r.fail("truncated file while reading values of '" + name + "'", r.pos);
    std::vector<float> values(numel(shape));
    for (auto& v : values) {
      const auto bits = r.get<std::uint32_t>("value");
      std::memcpy(&v, &bits, sizeof(v));
    }
    loaded.push_back(Tensor<float>::parameter(std::move(shape), std::move(values)));
  }
  if (r.pos != r.data.size()) r.fail("trailing bytes after last array", r.pos);

  ModelParams<float> p;
  for (int l = 0; l < 3; ++l) {
    p.conv_w[l] = loaded[2 * l];
    p.conv_b[l] = loaded[2 * l + 1];
  }
  p.fc_w = loaded[6];
  p.fc_b = loaded[7];
  for (int i = 0; i < k; ++i) {
    p.head_w.push_back(loaded[8 + 2 * i]);
    p.head_b.push_back(loaded[9 + 2 * i]);
  }
  // Recover the architecture from the stored shapes and check consistency.
  auto bad = [&](const std::string& why) { r.fail("inconsistent shapes: " + why, 12); };
  for (int l = 0; l < 3; ++l) {
    if (p.conv_w[l].rank() != 4 || p.conv_w[l].dim(2) != 3 || p.conv_w[l].dim(3) != 3)
      bad("conv weights must be O x I x 3 x 3");
    p.arch.widths[l] = static_cast<int>(p.conv_w[l].dim(0));
  }
  if (p.fc_w.rank() != 2 || p.fc_w.dim(0) % static_cast<std::size_t>(p.arch.widths[2]) != 0)
    bad("fc weight");
  const auto cells = p.fc_w.dim(0) / static_cast<std::size_t>(p.arch.widths[2]);
  const auto side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(cells))));
  p.arch.image_side = side * 8;
  p.arch.feature_dim = static_cast<int>(p.fc_w.dim(1));
  p.arch.num_experts = k;
  p.arch.num_classes = c;
  try {
    p.arch.validate();
  } catch (const ContractError& e) {
    bad(e.what());
  }
  if (static_cast<std::size_t>(side * side) != cells) bad("fc input is not a square map");
  const std::size_t in_ch[3] = {3, static_cast<std::size_t>(p.arch.widths[0]),
                                static_cast<std::size_t>(p.arch.widths[1])};
  for (int l = 0; l < 3; ++l)
    if (p.conv_w[l].dim(1) != in_ch[l] || p.conv_b[l].shape() != Shape{p.conv_w[l].dim(0)})
      bad("conv" + std::to_string(l + 1));
  if (p.fc_b.shape() != Shape{p.fc_w.dim(1)}) bad("fc bias");
  for (int i = 0; i < k; ++i) {
    const auto& w = p.head_w[static_cast<std::size_t>(i)];
    if (w.shape() != Shape{p.fc_w.dim(1), static_cast<std::size_t>(c)} ||
        p.head_b[static_cast<std::size_t>(i)].shape() != Shape{static_cast<std::size_t>(c)})
      bad("head" + std::to_string(i));
  }
  return p;
}

#define DAEL_INSTANTIATE(T)                                                                 \
  template struct ModelParams<T>;                                                           \
  template ModelParams<T> init_params(const Architecture&, std::uint64_t);                  \
  template Tensor<T> backbone(const ModelParams<T>&, const Tensor<T>&);                     \
  template Tensor<T> head_probs(const ModelParams<T>&, int, const Tensor<T>&);              \
  template Tensor<T> expert_forward(const ModelParams<T>&, int, const Tensor<T>&);          \
  template Tensor<T> average(std::span<const Tensor<T>>);                                   \
  template Tensor<T> ensemble_from_features(const ModelParams<T>&, const Tensor<T>&,        \
                                            std::span<const int>);                          \
  template Tensor<T> ensemble_predict(const ModelParams<T>&, const Tensor<T>&,              \
                                      std::span<const int>);                                \
  template std::vector<int> argmax_rows(const Tensor<T>&);                                  \
  template std::vector<int> predict_class(const ModelParams<T>&, const Tensor<T>&);

DAEL_INSTANTIATE(float)
DAEL_INSTANTIATE(double)

#undef DAEL_INSTANTIATE

}  // namespace dael
