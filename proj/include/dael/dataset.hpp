#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dael/image.hpp"
#include "dael/rng.hpp"
#include "dael/tensor.hpp"

namespace dael {

/// Counts reads through DomainDataset accessors. Used to prove which data a
/// training run touched.
struct AccessCounter {
  std::atomic<std::size_t> image_reads{0};
  std::atomic<std::size_t> label_reads{0};
};

class DomainDataset {
 public:
  DomainDataset() = default;
  DomainDataset(int domain_id, int num_classes, std::vector<Image> images,
                std::vector<int> labels);

  int domain_id() const { return domain_id_; }
  int num_classes() const { return num_classes_; }
  std::size_t size() const { return images_.size(); }
  bool empty() const { return images_.empty(); }
  int height() const { return images_.empty() ? 0 : images_.front().height; }
  int width() const { return images_.empty() ? 0 : images_.front().width; }

  const Image& image(std::size_t i) const;
  int label(std::size_t i) const;

  void attach_counter(std::shared_ptr<AccessCounter> counter) { counter_ = std::move(counter); }

  friend bool operator==(const DomainDataset& a, const DomainDataset& b) {
    return a.domain_id_ == b.domain_id_ && a.num_classes_ == b.num_classes_ &&
           a.images_ == b.images_ && a.labels_ == b.labels_;
  }

 private:
  int domain_id_ = 0;
  int num_classes_ = 0;
  std::vector<Image> images_;
  std::vector<int> labels_;
  std::shared_ptr<AccessCounter> counter_;
};

/// Image-only view of a dataset; unlabeled target pools are passed around as
/// this type so labels are unreachable.
class UnlabeledView {
 public:
  explicit UnlabeledView(const DomainDataset& data) : data_(&data) {}
  std::size_t size() const { return data_->size(); }
  const Image& image(std::size_t i) const { return data_->image(i); }
  int domain_id() const { return data_->domain_id(); }

 private:
  const DomainDataset* data_;
};

// ---- synthetic generation --------------------------------------------------

enum class DomainStyle { plain, inverted, noisy, textured };

std::string_view style_name(DomainStyle style);
DomainStyle style_from_name(std::string_view name);

struct SynthSpec {
  int num_classes = 5;
  int image_side = 32;
  int train_per_domain = 2000;
  int test_per_domain = 500;
  std::vector<DomainStyle> domains{DomainStyle::plain, DomainStyle::inverted,
                                   DomainStyle::noisy, DomainStyle::textured};
  std::uint64_t seed = 0;

  void validate() const;
};

/// Per-sample rendering parameters shared by every domain style.
struct GlyphLatent {
  int label = 0;
  double center_x = 0, center_y = 0;
  double radius = 0;
  double angle = 0;
  std::array<double, 3> glyph_rgb{};
  std::array<double, 3> background_rgb{};
  double stripe_phase = 0;
  std::uint64_t noise_seed = 0;
};

inline constexpr int kNumGlyphs = 5;  // disk, square, triangle, cross, ring
inline constexpr double kNoiseSigma = 25.0;
inline constexpr double kPositionJitter = 3.0;
inline constexpr double kScaleJitter = 0.2;

GlyphLatent sample_latent(Rng& rng, int label, int image_side);
Image render_glyph(const GlyphLatent& latent, DomainStyle style, int image_side);

struct DomainSplit {
  std::string name;
  DomainDataset train;
  DomainDataset test;
};

std::vector<DomainSplit> generate_synthetic(const SynthSpec& spec);

// ---- persistence (DAELDS1) -------------------------------------------------

inline constexpr std::size_t kDatasetHeaderBytes = 20;

void save_dataset(const DomainDataset& data, const std::filesystem::path& path);
DomainDataset load_dataset(const std::filesystem::path& path);

// ---- batching ----------------------------------------------------------------

/// Mini-batch of images scaled to [0, 1], shape B x 3 x H x W.
template <typename T>
struct Batch {
  Tensor<T> x;
  std::vector<int> y;
  std::vector<int> domain;
};

template <typename T>
Tensor<T> images_to_tensor(std::span<const Image> images);

/// Epoch-level shuffled order over [0, n). Batch `t` of epoch `e` takes
/// positions [t*B, t*B + B) of the concatenated per-pass permutations, so a
/// pool smaller than an epoch's demand is reshuffled and reused.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::size_t batch, std::uint64_t seed);
  std::vector<std::size_t> indices(std::size_t epoch, std::size_t iteration) const;
  std::size_t batch() const { return batch_; }

 private:
  std::vector<std::size_t> permutation(std::size_t epoch, std::size_t pass) const;
  std::size_t n_;
  std::size_t batch_;
  std::uint64_t seed_;
};

/// One batch per dataset for the given epoch and iteration.
std::vector<Batch<float>> sample_domain_batches(std::span<const DomainDataset> datasets,
                                                std::size_t per_domain, std::uint64_t seed,
                                                std::size_t epoch, std::size_t iteration);

}  // namespace dael
