#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace ipa {

// Validation failures that should exit the CLI with code 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Reserved symbol ids shared by every corpus and model. Content tokens start
// at kContentBase and the generator never emits the reserved ids.
struct Vocabulary {
  int64_t content_size = 0;
  static constexpr int64_t kBlank = 0;
  static constexpr int64_t kPad = 1;
  static constexpr int64_t kBos = 2;
  static constexpr int64_t kEos = 3;
  static constexpr int64_t kContentBase = 4;

  int64_t size() const { return content_size + kContentBase; }
  int64_t content(int64_t k) const { return kContentBase + k; }
};

struct GenConfig {
  int64_t alphabet = 8;       // content token count
  int64_t feat_dim = 16;
  int64_t utterances = 2000;
  int64_t min_tokens = 3;
  int64_t max_tokens = 8;
  int64_t min_duration = 2;   // frames per token
  int64_t max_duration = 5;
  double noise_sigma = 0.3;
  std::string task = "asr";   // "asr": y = x; "mapped": y = per-token remap
  std::string split = "train";
  uint64_t seed = 1;

  void validate() const;
};

struct UtteranceRecord {
  std::string id;
  int64_t frames = 0;
  int64_t dim = 0;
  std::vector<int64_t> x;  // source tokens (content ids)
  std::vector<int64_t> y;  // target tokens
  std::string path;        // feature file, relative to the manifest dir
};

struct CorpusManifest {
  GenConfig config;  // generator echo
  std::string root;  // directory holding meta.json / manifest.jsonl / feats
  std::vector<UtteranceRecord> records;
  std::unordered_map<std::string, size_t> index;

  Vocabulary vocab() const { return Vocabulary{config.alphabet}; }
  const UtteranceRecord& record(const std::string& id) const;
};

// Writes feats/<id>.f32 (raw little-endian float32, row-major frames x dim),
// manifest.jsonl and meta.json under out_dir. Deterministic per config+seed;
// each utterance derives its own stream from hash(seed, id).
CorpusManifest gen_corpus(const GenConfig& config, const std::string& out_dir);

CorpusManifest load_manifest(const std::string& dir);

// Raw feature matrix for one utterance (frames x dim). Verifies byte length.
std::vector<float> load_features(const CorpusManifest& m,
                                 const UtteranceRecord& rec);

// Optional in-memory cache for the trainer's hot loop.
struct FeatureCache {
  const CorpusManifest* manifest = nullptr;
  std::unordered_map<std::string, std::vector<float>> store;
  const std::vector<float>& get(const UtteranceRecord& rec);
};

// Per-utterance, per-dimension normalization to zero mean / unit variance
// over the valid frames, with a variance floor of eps.
template <typename T>
void cmvn(T* feats, int64_t frames, int64_t dim, T eps = T(1e-5));

struct Batch {
  int64_t size = 0;
  int64_t max_frames = 0;
  int64_t feat_dim = 0;
  std::vector<float> features;  // [size, max_frames, feat_dim], zero padded
  std::vector<int64_t> frames;  // valid frames per row
  std::vector<std::vector<int64_t>> x;
  std::vector<std::vector<int64_t>> y;  // framed: bos, tokens..., eos

  const float* row(int64_t r) const {
    return features.data() + r * max_frames * feat_dim;
  }
  float* row(int64_t r) { return features.data() + r * max_frames * feat_dim; }
};

// Stored features are copied bit-exactly into the padded block; y rows are
// framed with bos/eos. Order follows `ids`.
Batch make_batch(const CorpusManifest& m, const std::vector<std::string>& ids,
                 FeatureCache* cache = nullptr);

}  // namespace ipa
