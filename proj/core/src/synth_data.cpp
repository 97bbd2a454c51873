#include "cnd/synth_data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "cnd/checkpoint.hpp"
#include "cnd/errors.hpp"
#include "cnd/rng.hpp"

namespace cnd::data {
namespace {

constexpr int kCorpusFormatVersion = 1;

// Stream ids for mix_seed, kept apart so adding a stream never shifts another.
constexpr std::uint64_t kTemplateStream = 1000;
constexpr std::uint64_t kPrototypeStream = 200000;
constexpr std::uint64_t kTrainStream = 400000;
constexpr std::uint64_t kTestStream = 600000;
constexpr std::uint64_t kRenderStream = 800000;

using Rgb = std::array<float, 3>;

Rgb hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = v, g = t, b = p;
  switch (sector) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

enum class Shape { Disc, Square, Band, Ring, Cross };

struct Prototype {
  Rgb background;
  Rgb foreground;
  Shape shape;
  double cx, cy, radius, angle;
};

Prototype make_prototype(const CorpusSpec& spec, std::int64_t label) {
  std::mt19937_64 rng(mix_seed(spec.seed, kPrototypeStream + static_cast<std::uint64_t>(label)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double hue = std::fmod(0.61803398875 * static_cast<double>(label) + 0.1 * unit(rng), 1.0);
  Prototype p;
  p.foreground = hsv_to_rgb(hue, 0.7 + 0.3 * unit(rng), 0.75 + 0.25 * unit(rng));
  p.background = hsv_to_rgb(hue + 0.5, 0.3 + 0.3 * unit(rng), 0.15 + 0.25 * unit(rng));
  p.shape = static_cast<Shape>(label % 5);
  const double s = static_cast<double>(spec.image_size);
  p.cx = s * (0.35 + 0.3 * unit(rng));
  p.cy = s * (0.35 + 0.3 * unit(rng));
  p.radius = s * (0.18 + 0.1 * unit(rng));
  p.angle = std::numbers::pi * unit(rng);
  return p;
}

// Signed coverage in [0,1] of pixel (x, y) by the prototype shape, 1px soft edge.
double coverage(const Prototype& p, double x, double y, double cx, double cy, double radius) {
  const double dx = x - cx, dy = y - cy;
  const double c = std::cos(p.angle), s = std::sin(p.angle);
  const double u = c * dx + s * dy, v = -s * dx + c * dy;
  double dist = 0.0;  // negative inside
  switch (p.shape) {
    case Shape::Disc: dist = std::hypot(dx, dy) - radius; break;
    case Shape::Square: dist = std::max(std::abs(u), std::abs(v)) - 0.85 * radius; break;
    case Shape::Band: dist = std::abs(v) - 0.35 * radius; break;
    case Shape::Ring: dist = std::abs(std::hypot(dx, dy) - 0.75 * radius) - 0.25 * radius; break;
    case Shape::Cross:
      dist = std::min(std::max(std::abs(u) - radius, std::abs(v) - 0.25 * radius),
                      std::max(std::abs(v) - radius, std::abs(u) - 0.25 * radius));
      break;
  }
  return std::clamp(0.5 - dist, 0.0, 1.0);
}

StimulusImage render(const CorpusSpec& spec, std::int64_t label, std::uint64_t jitter_seed) {
  const Prototype p = make_prototype(spec, label);
  std::mt19937_64 rng(jitter_seed);
  std::uniform_real_distribution<double> shift(-2.0, 2.0);
  std::uniform_real_distribution<double> scale(0.92, 1.08);
  std::uniform_real_distribution<double> gain(-0.05, 0.05);
  std::normal_distribution<double> pixel_noise(0.0, 0.02);

  const double cx = p.cx + shift(rng), cy = p.cy + shift(rng), radius = p.radius * scale(rng);
  const double brightness = gain(rng);

  StimulusImage img;
  img.size = spec.image_size;
  img.concept_label = label;
  img.pixels.resize(static_cast<std::size_t>(spec.image_size * spec.image_size * 3));
  std::size_t k = 0;
  for (std::int64_t y = 0; y < spec.image_size; ++y) {
    for (std::int64_t x = 0; x < spec.image_size; ++x) {
      const double a = coverage(p, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, cx, cy, radius);
      for (int ch = 0; ch < 3; ++ch) {
        const double value = a * p.foreground[ch] + (1.0 - a) * p.background[ch] + brightness + pixel_noise(rng);
        img.pixels[k++] = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
  }
  return img;
}

std::vector<float> tensor_to_vector(const torch::Tensor& t) {
  const auto c = t.contiguous();
  return {c.data_ptr<float>(), c.data_ptr<float>() + c.numel()};
}

FmriSample make_sample(const CorpusSpec& spec, const std::vector<float>& tmpl, std::int64_t label,
                       std::uint64_t noise_seed, const std::string& stimulus_id) {
  auto gen = make_generator(noise_seed);
  auto voxels = torch::from_blob(const_cast<float*>(tmpl.data()), {spec.voxel_count}, torch::kFloat32).clone();
  if (spec.noise_std > 0.0) {
    voxels += static_cast<float>(spec.noise_std) * torch::randn({spec.voxel_count}, gen, torch::kFloat32);
  }
  return FmriSample{tensor_to_vector(voxels), spec.subject_id, stimulus_id, label};
}

std::string stimulus_name(const char* split, std::int64_t label, std::int64_t index) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_c%03lld_%04lld", split, static_cast<long long>(label),
                static_cast<long long>(index));
  return buf;
}

}  // namespace

void CorpusSpec::validate() const {
  if (num_classes < 1) throw ConfigError("corpus: num_classes must be positive");
  if (samples_per_class_train < 1) throw ConfigError("corpus: samples_per_class_train must be positive");
  if (samples_per_class_test < 0) throw ConfigError("corpus: samples_per_class_test must be non-negative");
  if (voxel_count < 1) throw ConfigError("corpus: voxel_count must be positive");
  if (patch_size < 1) throw ConfigError("corpus: patch_size must be positive");
  if (voxel_count % patch_size != 0) {
    throw ConfigError("corpus: voxel_count " + std::to_string(voxel_count) + " is not a multiple of patch size " +
                      std::to_string(patch_size));
  }
  if (image_size < 4) throw ConfigError("corpus: image_size must be at least 4");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ConfigError("corpus: noise_std must be >= 0");
  if (disjoint_test_classes && (num_test_classes < 1 || num_test_classes >= num_classes)) {
    throw ConfigError("corpus: disjoint split needs 1 <= num_test_classes < num_classes");
  }
}

std::vector<std::int64_t> CorpusSpec::train_classes() const {
  const std::int64_t end = disjoint_test_classes ? num_classes - num_test_classes : num_classes;
  std::vector<std::int64_t> out(static_cast<std::size_t>(end));
  for (std::int64_t c = 0; c < end; ++c) out[static_cast<std::size_t>(c)] = c;
  return out;
}

std::vector<std::int64_t> CorpusSpec::test_classes() const {
  const std::int64_t begin = disjoint_test_classes ? num_classes - num_test_classes : 0;
  std::vector<std::int64_t> out;
  for (std::int64_t c = begin; c < num_classes; ++c) out.push_back(c);
  return out;
}

void to_json(nlohmann::json& j, const CorpusSpec& s) {
  j = {{"num_classes", s.num_classes},
       {"samples_per_class_train", s.samples_per_class_train},
       {"samples_per_class_test", s.samples_per_class_test},
       {"voxel_count", s.voxel_count},
       {"image_size", s.image_size},
       {"noise_std", s.noise_std},
       {"seed", s.seed},
       {"patch_size", s.patch_size},
       {"disjoint_test_classes", s.disjoint_test_classes},
       {"num_test_classes", s.num_test_classes},
       {"subject_id", s.subject_id}};
}

void from_json(const nlohmann::json& j, CorpusSpec& s) {
  j.at("num_classes").get_to(s.num_classes);
  j.at("samples_per_class_train").get_to(s.samples_per_class_train);
  j.at("samples_per_class_test").get_to(s.samples_per_class_test);
  j.at("voxel_count").get_to(s.voxel_count);
  j.at("image_size").get_to(s.image_size);
  j.at("noise_std").get_to(s.noise_std);
  j.at("seed").get_to(s.seed);
  j.at("patch_size").get_to(s.patch_size);
  j.at("disjoint_test_classes").get_to(s.disjoint_test_classes);
  j.at("num_test_classes").get_to(s.num_test_classes);
  j.at("subject_id").get_to(s.subject_id);
}

std::vector<float> voxel_template(const CorpusSpec& spec, std::int64_t concept_label) {
  auto gen = make_generator(mix_seed(spec.seed, kTemplateStream + static_cast<std::uint64_t>(concept_label)));
  return tensor_to_vector(torch::randn({spec.voxel_count}, gen, torch::kFloat32));
}

Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Corpus corpus;
  corpus.spec = spec;

  std::vector<std::vector<float>> templates;
  templates.reserve(static_cast<std::size_t>(spec.num_classes));
  for (std::int64_t c = 0; c < spec.num_classes; ++c) templates.push_back(voxel_template(spec, c));

  auto fill = [&](std::vector<CorpusItem>& out, const std::vector<std::int64_t>& classes, std::int64_t per_class,
                  std::uint64_t stream, const char* split) {
    std::uint64_t index = 0;
    for (const auto c : classes) {
      for (std::int64_t i = 0; i < per_class; ++i, ++index) {
        const auto stimulus = stimulus_name(split, c, i);
        auto fmri = make_sample(spec, templates[static_cast<std::size_t>(c)], c, mix_seed(spec.seed, stream + 2 * index),
                                stimulus);
        auto image = render(spec, c, mix_seed(spec.seed, stream + 2 * index + 1));
        out.push_back(CorpusItem{std::move(fmri), std::move(image)});
      }
    }
  };
  fill(corpus.train, spec.train_classes(), spec.samples_per_class_train, kTrainStream, "train");
  fill(corpus.test, spec.test_classes(), spec.samples_per_class_test, kTestStream, "test");
  return corpus;
}

std::vector<StimulusImage> render_images(const CorpusSpec& spec, std::int64_t per_class, std::uint64_t seed) {
  spec.validate();
  std::vector<StimulusImage> out;
  out.reserve(static_cast<std::size_t>(spec.num_classes * per_class));
  std::uint64_t index = 0;
  for (std::int64_t c = 0; c < spec.num_classes; ++c) {
    for (std::int64_t i = 0; i < per_class; ++i, ++index) {
      out.push_back(render(spec, c, mix_seed(mix_seed(spec.seed, kRenderStream), mix_seed(seed, index))));
    }
  }
  return out;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  const auto& spec = corpus.spec;
  std::filesystem::create_directories(dir);
  const std::size_t pixels_per_image = static_cast<std::size_t>(spec.image_size * spec.image_size * 3);

  nlohmann::json manifest;
  manifest["format"] = "cnd-corpus";
  manifest["version"] = kCorpusFormatVersion;
  manifest["dtype"] = "float32";
  manifest["byte_order"] = "little";
  manifest["voxel_count"] = spec.voxel_count;
  manifest["image_shape"] = {spec.image_size, spec.image_size, 3};
  manifest["spec"] = spec;
  manifest["splits"] = {{"train", corpus.train.size()}, {"test", corpus.test.size()}};
  manifest["samples"] = nlohmann::json::array();

  std::ofstream voxels(dir / "voxels.bin", std::ios::binary | std::ios::trunc);
  std::ofstream images(dir / "images.bin", std::ios::binary | std::ios::trunc);
  if (!voxels || !images) throw FormatError("cannot write corpus blobs in " + dir.string());

  auto emit = [&](const std::vector<CorpusItem>& items, const char* split) {
    for (const auto& item : items) {
      if (item.fmri.voxels.size() != static_cast<std::size_t>(spec.voxel_count) ||
          item.image.pixels.size() != pixels_per_image) {
        throw ShapeError("save_corpus: sample " + item.fmri.stimulus_id + " does not match the corpus spec");
      }
      manifest["samples"].push_back({{"split", split},
                                     {"subject_id", item.fmri.subject_id},
                                     {"stimulus_id", item.fmri.stimulus_id},
                                     {"concept_label", item.fmri.concept_label},
                                     {"image_label", item.image.concept_label}});
      io::write_f32_le(voxels, item.fmri.voxels.data(), item.fmri.voxels.size());
      io::write_f32_le(images, item.image.pixels.data(), item.image.pixels.size());
    }
  };
  emit(corpus.train, "train");
  emit(corpus.test, "test");

  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << '\n';
}

Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream manifest_in(dir / "manifest.json");
  if (!manifest_in) throw FormatError("corpus: missing manifest.json in " + dir.string());
  nlohmann::json manifest;
  Corpus corpus;
  std::vector<std::size_t> split_counts(2, 0);
  try {
    manifest = nlohmann::json::parse(manifest_in);
    if (manifest.at("format").get<std::string>() != "cnd-corpus") throw FormatError("corpus: wrong format tag");
    if (manifest.at("version").get<int>() != kCorpusFormatVersion) throw FormatError("corpus: unsupported version");
    if (manifest.at("dtype").get<std::string>() != "float32") throw FormatError("corpus: dtype must be float32");
    corpus.spec = manifest.at("spec").get<CorpusSpec>();
    if (manifest.at("voxel_count").get<std::int64_t>() != corpus.spec.voxel_count) {
      throw FormatError("corpus: manifest voxel_count disagrees with spec");
    }
    const auto shape = manifest.at("image_shape").get<std::vector<std::int64_t>>();
    if (shape != std::vector<std::int64_t>{corpus.spec.image_size, corpus.spec.image_size, 3}) {
      throw FormatError("corpus: image_shape disagrees with spec");
    }
    split_counts[0] = manifest.at("splits").at("train").get<std::size_t>();
    split_counts[1] = manifest.at("splits").at("test").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corpus: malformed manifest: ") + e.what());
  }

  const auto& samples = manifest.at("samples");
  const std::size_t total = split_counts[0] + split_counts[1];
  if (samples.size() != total) throw FormatError("corpus: sample list length disagrees with split counts");

  const auto voxel_count = static_cast<std::size_t>(corpus.spec.voxel_count);
  const auto pixel_count = static_cast<std::size_t>(corpus.spec.image_size * corpus.spec.image_size * 3);
  const auto expect_bytes = [&](const char* name, std::size_t floats) {
    const auto path = dir / name;
    if (!std::filesystem::exists(path)) throw FormatError(std::string("corpus: missing ") + name);
    const auto size = std::filesystem::file_size(path);
    if (size != floats * sizeof(float)) {
      throw FormatError(std::string("corpus: ") + name + " holds " + std::to_string(size / sizeof(float)) +
                        " floats, manifest declares " + std::to_string(floats));
    }
  };
  expect_bytes("voxels.bin", total * voxel_count);
  expect_bytes("images.bin", total * pixel_count);

  std::ifstream voxels(dir / "voxels.bin", std::ios::binary);
  std::ifstream images(dir / "images.bin", std::ios::binary);
  for (std::size_t i = 0; i < total; ++i) {
    const auto& entry = samples[i];
    CorpusItem item;
    try {
      item.fmri.subject_id = entry.at("subject_id").get<std::string>();
      item.fmri.stimulus_id = entry.at("stimulus_id").get<std::string>();
      item.fmri.concept_label = entry.at("concept_label").get<std::int64_t>();
      item.image.concept_label = entry.at("image_label").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("corpus: malformed sample entry: ") + e.what());
    }
    item.fmri.voxels.resize(voxel_count);
    item.image.size = corpus.spec.image_size;
    item.image.pixels.resize(pixel_count);
    io::read_f32_le(voxels, item.fmri.voxels.data(), voxel_count);
    io::read_f32_le(images, item.image.pixels.data(), pixel_count);
    if (!voxels || !images) throw FormatError("corpus: truncated binary blob");

    const auto split = entry.value("split", std::string{});
    const bool is_train = i < split_counts[0];
    if (split != (is_train ? "train" : "test")) throw FormatError("corpus: samples are not grouped train-then-test");
    (is_train ? corpus.train : corpus.test).push_back(std::move(item));
  }
  return corpus;
}

std::vector<std::vector<std::size_t>> batch_iter(std::size_t split_size, std::size_t batch_size, std::uint64_t seed,
                                                 bool drop_last) {
  if (batch_size < 1) throw ConfigError("batch_iter: batch_size must be >= 1");
  std::vector<std::size_t> order(split_size);
  for (std::size_t i = 0; i < split_size; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < split_size; start += batch_size) {
    const std::size_t end = std::min(split_size, start + batch_size);
    if (drop_last && end - start < batch_size) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

torch::Tensor voxel_matrix(const std::vector<CorpusItem>& items) {
  if (items.empty()) return torch::empty({0, 0});
  const auto v = static_cast<std::int64_t>(items.front().fmri.voxels.size());
  auto out = torch::empty({static_cast<std::int64_t>(items.size()), v});
  auto* dst = out.data_ptr<float>();
  for (const auto& item : items) {
    if (static_cast<std::int64_t>(item.fmri.voxels.size()) != v) throw ShapeError("voxel_matrix: ragged voxel counts");
    dst = std::copy(item.fmri.voxels.begin(), item.fmri.voxels.end(), dst);
  }
  return out;
}

torch::Tensor image_tensor(const StimulusImage& image) {
  return torch::from_blob(const_cast<float*>(image.pixels.data()), {image.size, image.size, 3}, torch::kFloat32)
      .permute({2, 0, 1})
      .contiguous();
}

torch::Tensor image_batch(const std::vector<StimulusImage>& images) {
  if (images.empty()) return torch::empty({0, 3, 0, 0});
  std::vector<torch::Tensor> list;
  list.reserve(images.size());
  for (const auto& img : images) list.push_back(image_tensor(img));
  return torch::stack(list);
}

torch::Tensor image_batch(const std::vector<CorpusItem>& items) {
  if (items.empty()) return torch::empty({0, 3, 0, 0});
  std::vector<torch::Tensor> list;
  list.reserve(items.size());
  for (const auto& item : items) list.push_back(image_tensor(item.image));
  return torch::stack(list);
}

torch::Tensor label_vector(const std::vector<CorpusItem>& items) {
  auto out = torch::empty({static_cast<std::int64_t>(items.size())}, torch::kInt64);
  for (std::size_t i = 0; i < items.size(); ++i) out[static_cast<std::int64_t>(i)] = items[i].fmri.concept_label;
  return out;
}

torch::Tensor label_vector(const std::vector<StimulusImage>& images) {
  auto out = torch::empty({static_cast<std::int64_t>(images.size())}, torch::kInt64);
  for (std::size_t i = 0; i < images.size(); ++i) out[static_cast<std::int64_t>(i)] = images[i].concept_label;
  return out;
}

}  // namespace cnd::data
