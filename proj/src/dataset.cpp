#include "dael/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dael/augment.hpp"
#include "dael/errors.hpp"

namespace dael {

DomainDataset::DomainDataset(int domain_id, int num_classes, std::vector<Image> images,
                             std::vector<int> labels)
    : domain_id_(domain_id),
      num_classes_(num_classes),
      images_(std::move(images)),
      labels_(std::move(labels)) {
  if (images_.size() != labels_.size())
    throw ContractError("DomainDataset: images and labels differ in length");
  for (const int y : labels_)
    if (y < 0 || y >= num_classes_)
      throw ContractError("DomainDataset: label " + std::to_string(y) + " outside [0, " +
                          std::to_string(num_classes_) + ")");
  for (const auto& img : images_)
    if (img.height != images_.front().height || img.width != images_.front().width)
      throw ContractError("DomainDataset: images must share one size");
}

const Image& DomainDataset::image(std::size_t i) const {
  if (counter_) counter_->image_reads.fetch_add(1, std::memory_order_relaxed);
  return images_.at(i);
}

int DomainDataset::label(std::size_t i) const {
  if (counter_) counter_->label_reads.fetch_add(1, std::memory_order_relaxed);
  return labels_.at(i);
}

// ---- synthetic generation ----------------------------------------------------

std::string_view style_name(DomainStyle style) {
  switch (style) {
    case DomainStyle::plain: return "plain";
    case DomainStyle::inverted: return "inverted";
    case DomainStyle::noisy: return "noisy";
    case DomainStyle::textured: return "textured";
  }
  return "?";
}

DomainStyle style_from_name(std::string_view name) {
  for (auto s : {DomainStyle::plain, DomainStyle::inverted, DomainStyle::noisy,
                 DomainStyle::textured})
    if (style_name(s) == name) return s;
  throw ContractError("unknown domain style '" + std::string(name) + "'");
}

void SynthSpec::validate() const {
  if (num_classes < 2 || num_classes > kNumGlyphs)
    throw ContractError("SynthSpec: num_classes must be in [2, " +
                        std::to_string(kNumGlyphs) + "]");
  if (domains.size() < 3) throw ContractError("SynthSpec: at least 3 domains required");
  if (domains.size() > 255) throw ContractError("SynthSpec: at most 255 domains");
  if (image_side < 8 || image_side % 8 != 0)
    throw ContractError("SynthSpec: image_side must be a positive multiple of 8");
  if (train_per_domain < num_classes || test_per_domain < num_classes)
    throw ContractError("SynthSpec: each split needs at least one sample per class");
}

GlyphLatent sample_latent(Rng& rng, int label, int side) {
  GlyphLatent z;
  z.label = label;
  z.center_x = side / 2.0 + uniform(rng, -kPositionJitter, kPositionJitter);
  z.center_y = side / 2.0 + uniform(rng, -kPositionJitter, kPositionJitter);
  z.radius = 0.3 * side * (1.0 + uniform(rng, -kScaleJitter, kScaleJitter));
  z.angle = uniform(rng, -0.2, 0.2);
  const double ink = uniform(rng, 20, 90);
  const double paper = uniform(rng, 175, 235);
  for (int c = 0; c < 3; ++c) {
    z.glyph_rgb[c] = std::clamp(ink + uniform(rng, -20, 20), 0.0, 255.0);
    z.background_rgb[c] = std::clamp(paper + uniform(rng, -15, 15), 0.0, 255.0);
  }
  z.stripe_phase = uniform(rng, 0, 6);
  z.noise_seed = rng();
  return z;
}

namespace {

bool inside_glyph(int label, double u, double v) {
  const double r = std::hypot(u, v);
  switch (label) {
    case 0:  // disk
      return r <= 1.0;
    case 1:  // square
      return std::max(std::abs(u), std::abs(v)) <= 0.8;
    case 2: {  // upward triangle
      if (v > 0.75 || v < -1.0) return false;
      const double half = (v + 1.0) / 1.75 * 0.95;
      return std::abs(u) <= half;
    }
    case 3:  // cross
      return (std::abs(u) <= 0.28 && std::abs(v) <= 1.0) ||
             (std::abs(v) <= 0.28 && std::abs(u) <= 1.0);
    default:  // ring
      return r <= 1.0 && r >= 0.55;
  }
}

Image box_blur3(const Image& img) {
  Image out = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < Image::channels; ++c) {
        int acc = 0, n = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || xx < 0 || yy >= img.height || xx >= img.width) continue;
            acc += img.at(yy, xx, c);
            ++n;
          }
        out.at(y, x, c) = static_cast<std::uint8_t>((acc + n / 2) / n);
      }
  return out;
}

}  // namespace

Image render_glyph(const GlyphLatent& z, DomainStyle style, int side) {
  if (style == DomainStyle::inverted)
    return augment::apply_transform(augment::Transform::Invert, 0,
                                    render_glyph(z, DomainStyle::plain, side));
  Image img(side, side);
  const double cs = std::cos(z.angle), sn = std::sin(z.angle);
  constexpr int kSuper = 4;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = x + (sx + 0.5) / kSuper - z.center_x;
          const double py = y + (sy + 0.5) / kSuper - z.center_y;
          const double u = (cs * px + sn * py) / z.radius;
          const double v = (-sn * px + cs * py) / z.radius;
          hits += inside_glyph(z.label, u, v);
        }
      const double alpha = hits / double(kSuper * kSuper);
      std::array<double, 3> bg = z.background_rgb;
      if (style == DomainStyle::textured &&
          std::fmod(x + y + z.stripe_phase, 6.0) < 3.0)
        for (auto& c : bg) c *= 0.55;
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = static_cast<std::uint8_t>(
            std::lround(std::clamp(bg[c] * (1 - alpha) + z.glyph_rgb[c] * alpha, 0.0, 255.0)));
    }
  if (style == DomainStyle::noisy) {
    Rng rng(z.noise_seed);
    std::normal_distribution<double> noise(0.0, kNoiseSigma);
    for (auto& p : img.pixels)
      p = static_cast<std::uint8_t>(std::lround(std::clamp(p + noise(rng), 0.0, 255.0)));
  } else if (style == DomainStyle::textured) {
    img = box_blur3(img);
  }
  return img;
}

std::vector<DomainSplit> generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  std::vector<DomainSplit> out;
  for (std::size_t d = 0; d < spec.domains.size(); ++d) {
    auto make = [&](int count, std::uint64_t split) {
      Rng rng(derive_seed(spec.seed, {d, split}));
      std::vector<Image> images;
      std::vector<int> labels;
      images.reserve(static_cast<std::size_t>(count));
      for (int i = 0; i < count; ++i) {
        const int label = i % spec.num_classes;
        const auto z = sample_latent(rng, label, spec.image_side);
        images.push_back(render_glyph(z, spec.domains[d], spec.image_side));
        labels.push_back(label);
      }
      return DomainDataset(static_cast<int>(d), spec.num_classes, std::move(images),
                           std::move(labels));
    };
    out.push_back({std::string(style_name(spec.domains[d])), make(spec.train_per_domain, 0),
                   make(spec.test_per_domain, 1)});
  }
  return out;
}

// ---- persistence ---------------------------------------------------------------

namespace {

constexpr char kDatasetMagic[8] = {'D', 'A', 'E', 'L', 'D', 'S', '1', '\0'};

template <typename U>
void put_le(std::string& buf, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i)
    buf.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string data, std::string what)
      : data_(std::move(data)), what_(std::move(what)) {}

  template <typename U>
  U get(std::string_view field) {
    need(sizeof(U), field);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  const char* bytes(std::size_t n, std::string_view field) {
    need(n, field);
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  [[noreturn]] void fail(std::string_view msg, std::size_t at) const {
    std::ostringstream os;
    os << what_ << ": " << msg << " at offset " << at;
    throw FormatError(os.str());
  }

 private:
  void need(std::size_t n, std::string_view field) const {
    if (pos_ + n > data_.size())
      fail("truncated file while reading " + std::string(field), pos_);
  }
  std::string data_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void save_dataset(const DomainDataset& data, const std::filesystem::path& path) {
  if (data.domain_id() < 0 || data.domain_id() > 255)
    throw ContractError("save_dataset: domain id must fit in one byte");
  std::string buf(kDatasetMagic, sizeof(kDatasetMagic));
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(data.size()));
  put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(data.num_classes()));
  put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(data.height()));
  put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(data.width()));
  put_le<std::uint8_t>(buf, static_cast<std::uint8_t>(Image::channels));
  put_le<std::uint8_t>(buf, static_cast<std::uint8_t>(data.domain_id()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(data.label(i)));
    const auto& px = data.image(i).pixels;
    buf.append(reinterpret_cast<const char*>(px.data()), px.size());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

DomainDataset load_dataset(const std::filesystem::path& path) {
  Reader r(read_file(path), path.string());
  const char* magic = r.bytes(sizeof(kDatasetMagic), "magic");
  if (std::memcmp(magic, kDatasetMagic, sizeof(kDatasetMagic)) != 0)
    r.fail("bad magic (expected DAELDS1)", 0);
  const auto count = r.get<std::uint32_t>("count");
  const auto classes = r.get<std::uint16_t>("num_classes");
  const auto height = r.get<std::uint16_t>("height");
  const auto width = r.get<std::uint16_t>("width");
  const auto channels_at = r.offset();
  const auto channels = r.get<std::uint8_t>("channels");
  const auto domain = r.get<std::uint8_t>("domain_id");
  if (channels != Image::channels) r.fail("unsupported channel count", channels_at);
  if (classes < 2) r.fail("num_classes must be >= 2", 12);
  const std::size_t record = 2 + std::size_t{height} * width * channels;
  if (std::size_t{count} * record != r.remaining())
    r.fail("file holds " + std::to_string(r.remaining()) + " payload bytes, header implies " +
               std::to_string(std::size_t{count} * record),
           8);
  std::vector<Image> images;
  std::vector<int> labels;
  images.reserve(count);
  labels.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto at = r.offset();
    const auto label = r.get<std::uint16_t>("label");
    if (label >= classes) r.fail("label " + std::to_string(label) + " >= num_classes", at);
    Image img(height, width);
    const char* px = r.bytes(img.pixels.size(), "pixels");
    std::memcpy(img.pixels.data(), px, img.pixels.size());
    images.push_back(std::move(img));
    labels.push_back(label);
  }
  return DomainDataset(domain, classes, std::move(images), std::move(labels));
}

// ---- batching -----------------------------------------------------------------

template <typename T>
Tensor<T> images_to_tensor(std::span<const Image> images) {
  if (images.empty()) throw ContractError("images_to_tensor: empty batch");
  const auto H = static_cast<std::size_t>(images.front().height);
  const auto W = static_cast<std::size_t>(images.front().width);
  std::vector<T> values(images.size() * 3 * H * W);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& img = images[n];
    if (static_cast<std::size_t>(img.height) != H || static_cast<std::size_t>(img.width) != W)
      throw DimensionError("images_to_tensor: mixed image sizes");
    T* dst = values.data() + n * 3 * H * W;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t c = 0; c < 3; ++c)
          dst[(c * H + y) * W + x] =
              static_cast<T>(img.pixels[(y * W + x) * 3 + c]) / static_cast<T>(255);
  }
  return Tensor<T>::constant({images.size(), 3, H, W}, std::move(values));
}

template Tensor<float> images_to_tensor(std::span<const Image>);
template Tensor<double> images_to_tensor(std::span<const Image>);

EpochSampler::EpochSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
    : n_(n), batch_(batch), seed_(seed) {
  if (batch == 0) throw ContractError("EpochSampler: batch size must be positive");
  if (n == 0) throw ContractError("EpochSampler: empty dataset");
}

std::vector<std::size_t> EpochSampler::permutation(std::size_t epoch, std::size_t pass) const {
  std::vector<std::size_t> perm(n_);
  for (std::size_t i = 0; i < n_; ++i) perm[i] = i;
  Rng rng(derive_seed(seed_, {epoch, pass}));
  for (std::size_t i = n_ - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(perm[i], perm[j]);
  }
  return perm;
}

std::vector<std::size_t> EpochSampler::indices(std::size_t epoch, std::size_t iteration) const {
  std::vector<std::size_t> out;
  out.reserve(batch_);
  std::size_t cached_pass = static_cast<std::size_t>(-1);
  std::vector<std::size_t> perm;
  for (std::size_t k = 0; k < batch_; ++k) {
    const std::size_t pos = iteration * batch_ + k;
    const std::size_t pass = pos / n_;
    if (pass != cached_pass) {
      perm = permutation(epoch, pass);
      cached_pass = pass;
    }
    out.push_back(perm[pos % n_]);
  }
  return out;
}

std::vector<Batch<float>> sample_domain_batches(std::span<const DomainDataset> datasets,
                                                std::size_t per_domain, std::uint64_t seed,
                                                std::size_t epoch, std::size_t iteration) {
  std::vector<Batch<float>> out;
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    const auto& data = datasets[d];
    if (per_domain > data.size())
      throw ContractError("sample_domain_batches: batch of " + std::to_string(per_domain) +
                          " exceeds domain size " + std::to_string(data.size()));
    EpochSampler sampler(data.size(), per_domain, derive_seed(seed, {d}));
    std::vector<Image> images;
    Batch<float> b;
    for (const auto i : sampler.indices(epoch, iteration)) {
      images.push_back(data.image(i));
      b.y.push_back(data.label(i));
      b.domain.push_back(data.domain_id());
    }
    b.x = images_to_tensor<float>(images);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace dael
