#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <unistd.h>

#include "dael/augment.hpp"
#include "dael/dataset.hpp"
#include "dael/errors.hpp"

using namespace dael;
namespace fs = std::filesystem;

namespace {

SynthSpec small_spec(std::uint64_t seed = 3) {
  SynthSpec s;
  s.train_per_domain = 100;
  s.test_per_domain = 25;
  s.seed = seed;
  return s;
}

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("dael_test_" + std::to_string(::getpid()) + "_" + name);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("default generation is class balanced") {
  SynthSpec s;
  s.test_per_domain = 5;
  const auto domains = generate_synthetic(s);
  REQUIRE(domains.size() == 4);
  for (const auto& d : domains) {
    CHECK(d.train.size() == 2000);
    std::map<int, int> counts;
    for (std::size_t i = 0; i < d.train.size(); ++i) ++counts[d.train.label(i)];
    CHECK(counts.size() == 5);
    for (const auto& [label, n] : counts) CHECK(n == 400);
    CHECK(d.train.height() == 32);
  }
  CHECK(domains[1].name == "inverted");
}

TEST_CASE("generation is deterministic and splits differ") {
  const auto a = generate_synthetic(small_spec());
  const auto b = generate_synthetic(small_spec());
  for (std::size_t d = 0; d < a.size(); ++d) {
    CHECK(a[d].train == b[d].train);
    CHECK(a[d].test == b[d].test);
    CHECK(a[d].train.domain_id() == static_cast<int>(d));
  }
  const auto c = generate_synthetic(small_spec(4));
  CHECK_FALSE(a[0].train == c[0].train);
  std::set<std::vector<std::uint8_t>> train_pixels;
  for (std::size_t i = 0; i < a[0].train.size(); ++i) train_pixels.insert(a[0].train.image(i).pixels);
  for (std::size_t i = 0; i < a[0].test.size(); ++i)
    CHECK(train_pixels.count(a[0].test.image(i).pixels) == 0);
}

TEST_CASE("inverted style is the inversion of plain for one latent") {
  Rng rng(8);
  for (int label = 0; label < kNumGlyphs; ++label) {
    const auto z = sample_latent(rng, label, 32);
    const auto plain = render_glyph(z, DomainStyle::plain, 32);
    const auto inverted = render_glyph(z, DomainStyle::inverted, 32);
    CHECK(inverted == augment::apply_transform(augment::Transform::Invert, 0, plain));
    CHECK_FALSE(render_glyph(z, DomainStyle::noisy, 32) == plain);
    CHECK_FALSE(render_glyph(z, DomainStyle::textured, 32) == plain);
  }
}

TEST_CASE("plain glyphs are dark on a light background") {
  Rng rng(9);
  const auto z = sample_latent(rng, 0, 32);
  const auto img = render_glyph(z, DomainStyle::plain, 32);
  CHECK(img.at(0, 0, 0) > 150);
  CHECK(img.at(static_cast<int>(z.center_y), static_cast<int>(z.center_x), 0) < 120);
}

TEST_CASE("spec validation") {
  SynthSpec s = small_spec();
  s.num_classes = 1;
  CHECK_THROWS_AS(generate_synthetic(s), ContractError);
  s = small_spec();
  s.domains.resize(2);
  CHECK_THROWS_AS(generate_synthetic(s), ContractError);
  s = small_spec();
  s.image_side = 30;
  CHECK_THROWS_AS(generate_synthetic(s), ContractError);
  CHECK(style_from_name("textured") == DomainStyle::textured);
  CHECK_THROWS_AS(style_from_name("sketch"), ContractError);
}

TEST_CASE("DAELDS1 round trip, size and corruption") {
  const auto domains = generate_synthetic(small_spec());
  const auto path = temp_file("ds.bin");
  save_dataset(domains[2].train, path);
  const auto loaded = load_dataset(path);
  CHECK(loaded == domains[2].train);
  CHECK(loaded.domain_id() == 2);
  const auto bytes = slurp(path);
  CHECK(bytes.size() == kDatasetHeaderBytes + 100 * (2 + 32 * 32 * 3));
  CHECK(bytes.substr(0, 8) == std::string("DAELDS1\0", 8));

  save_dataset(loaded, path);
  CHECK(slurp(path) == bytes);

  auto bad = bytes;
  bad[0] = 'X';
  spit(path, bad);
  CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("magic"), FormatError);

  spit(path, bytes.substr(0, bytes.size() - 7));
  CHECK_THROWS_AS(load_dataset(path), FormatError);

  bad = bytes;
  bad[kDatasetHeaderBytes] = 9;  // first label >= C
  spit(path, bad);
  CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("offset 20"), FormatError);

  bad = bytes;
  bad[8] = '\xff';  // count
  spit(path, bad);
  CHECK_THROWS_AS(load_dataset(path), FormatError);
  fs::remove(path);
  CHECK_THROWS_AS(load_dataset(path), FormatError);
}

TEST_CASE("epoch sampler visits every index once per epoch") {
  EpochSampler s(40, 8, 5);
  for (std::size_t epoch = 0; epoch < 3; ++epoch) {
    std::multiset<std::size_t> seen;
    for (std::size_t it = 0; it < 5; ++it)
      for (const auto i : s.indices(epoch, it)) seen.insert(i);
    CHECK(seen.size() == 40);
    CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 40);
  }
  CHECK(s.indices(1, 2) == EpochSampler(40, 8, 5).indices(1, 2));
  CHECK(s.indices(0, 0) != s.indices(1, 0));
}

TEST_CASE("domain batches and pixel scaling") {
  const auto domains = generate_synthetic(small_spec());
  std::vector<DomainDataset> train;
  for (const auto& d : domains) train.push_back(d.train);
  const auto batches = sample_domain_batches(train, 8, 1, 0, 0);
  REQUIRE(batches.size() == 4);
  for (std::size_t d = 0; d < 4; ++d) {
    CHECK(batches[d].x.shape() == Shape{8, 3, 32, 32});
    CHECK(batches[d].y.size() == 8);
    for (const int dom : batches[d].domain) CHECK(dom == static_cast<int>(d));
  }
  CHECK_THROWS_AS(sample_domain_batches(train, 101, 1, 0, 0), ContractError);

  Image img(8, 8, 0);
  img.at(0, 0, 0) = 255;
  const std::vector<Image> one{img};
  const auto x = images_to_tensor<float>(one);
  CHECK(x[0] == 1.0f);
  CHECK(x[1] == 0.0f);
}

TEST_CASE("access counter") {
  auto d = generate_synthetic(small_spec())[0].train;
  auto counter = std::make_shared<AccessCounter>();
  d.attach_counter(counter);
  const UnlabeledView view(d);
  (void)view.image(3);
  (void)d.label(4);
  CHECK(counter->image_reads == 1);
  CHECK(counter->label_reads == 1);
}

TEST_CASE("DomainDataset validation") {
  std::vector<Image> imgs{Image(4, 4), Image(4, 4)};
  CHECK_THROWS_AS(DomainDataset(0, 2, imgs, {0}), ContractError);
  CHECK_THROWS_AS(DomainDataset(0, 2, imgs, {0, 2}), ContractError);
  CHECK_THROWS_AS(DomainDataset(0, 2, {Image(4, 4), Image(8, 8)}, {0, 1}), ContractError);
}
