#include "ipa/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "ipa/io.hpp"
#include "ipa/rng.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ipa {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write: " + path);
}

void GenConfig::validate() const {
  if (alphabet < 2) throw ConfigError("gen: alphabet must be >= 2");
  if (feat_dim < 1) throw ConfigError("gen: feat_dim must be >= 1");
  if (utterances < 1) throw ConfigError("gen: utterance count must be >= 1");
  if (min_tokens < 1 || max_tokens < min_tokens)
    throw ConfigError("gen: bad token length range");
  if (min_duration < 1 || max_duration < min_duration || max_duration > 16)
    throw ConfigError("gen: duration range must lie within [1, 16]");
  if (noise_sigma < 0.0) throw ConfigError("gen: noise sigma must be >= 0");
  if (task != "asr" && task != "mapped")
    throw ConfigError("gen: task must be 'asr' or 'mapped'");
}

const UtteranceRecord& CorpusManifest::record(const std::string& id) const {
  auto it = index.find(id);
  if (it == index.end())
    throw std::invalid_argument("manifest: unknown utterance id '" + id + "'");
  return records[it->second];
}

namespace {

json gen_config_json(const GenConfig& c) {
  return json{{"alphabet", c.alphabet},
              {"feat_dim", c.feat_dim},
              {"utterances", c.utterances},
              {"min_tokens", c.min_tokens},
              {"max_tokens", c.max_tokens},
              {"min_duration", c.min_duration},
              {"max_duration", c.max_duration},
              {"noise_sigma", c.noise_sigma},
              {"task", c.task},
              {"split", c.split},
              {"seed", std::to_string(c.seed)}};
}

GenConfig gen_config_from_json(const json& j) {
  GenConfig c;
  c.alphabet = j.at("alphabet").get<int64_t>();
  c.feat_dim = j.at("feat_dim").get<int64_t>();
  c.utterances = j.at("utterances").get<int64_t>();
  c.min_tokens = j.at("min_tokens").get<int64_t>();
  c.max_tokens = j.at("max_tokens").get<int64_t>();
  c.min_duration = j.at("min_duration").get<int64_t>();
  c.max_duration = j.at("max_duration").get<int64_t>();
  c.noise_sigma = j.at("noise_sigma").get<double>();
  c.task = j.at("task").get<std::string>();
  c.split = j.at("split").get<std::string>();
  c.seed = std::stoull(j.at("seed").get<std::string>());
  return c;
}

// Token prototypes depend only on (seed, alphabet, feat_dim), so splits
// generated from the same seed share them.
std::vector<float> token_prototypes(const GenConfig& c) {
  CounterRng rng(c.seed, "prototypes");
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<float> protos(static_cast<size_t>(c.alphabet * c.feat_dim));
  for (auto& v : protos) v = static_cast<float>(dist(rng));
  return protos;
}

std::vector<int64_t> target_map(const GenConfig& c) {
  std::vector<int64_t> map(static_cast<size_t>(c.alphabet));
  for (int64_t k = 0; k < c.alphabet; ++k) map[static_cast<size_t>(k)] = k;
  CounterRng rng(c.seed, "target-map");
  for (int64_t k = c.alphabet - 1; k > 0; --k)
    std::swap(map[static_cast<size_t>(k)],
              map[static_cast<size_t>(rng.uniform_int(0, k))]);
  return map;
}

}  // namespace

CorpusManifest gen_corpus(const GenConfig& config, const std::string& out_dir) {
  config.validate();
  fs::create_directories(fs::path(out_dir) / "feats");

  const std::vector<float> protos = token_prototypes(config);
  const std::vector<int64_t> tmap = target_map(config);
  const Vocabulary vocab{config.alphabet};

  CorpusManifest m;
  m.config = config;
  m.root = out_dir;

  std::ostringstream manifest_lines;
  for (int64_t u = 0; u < config.utterances; ++u) {
    char idbuf[64];
    std::snprintf(idbuf, sizeof(idbuf), "%s-%06lld", config.split.c_str(),
                  static_cast<long long>(u));
    UtteranceRecord rec;
    rec.id = idbuf;
    rec.dim = config.feat_dim;

    // Independent stream per utterance: results do not depend on scheduling.
    CounterRng rng(hash_str(config.seed, rec.id));
    std::normal_distribution<double> noise(0.0, 1.0);

    const int64_t ntok = rng.uniform_int(config.min_tokens, config.max_tokens);
    std::vector<int64_t> alpha_tokens(static_cast<size_t>(ntok));
    std::vector<int64_t> durations(static_cast<size_t>(ntok));
    for (int64_t t = 0; t < ntok; ++t) {
      alpha_tokens[static_cast<size_t>(t)] =
          rng.uniform_int(0, config.alphabet - 1);
      durations[static_cast<size_t>(t)] =
          rng.uniform_int(config.min_duration, config.max_duration);
    }
    rec.frames = 0;
    for (int64_t d : durations) rec.frames += d;

    std::string bytes;
    bytes.reserve(static_cast<size_t>(rec.frames * rec.dim * 4));
    for (int64_t t = 0; t < ntok; ++t) {
      const float* proto = protos.data() +
                           alpha_tokens[static_cast<size_t>(t)] * config.feat_dim;
      for (int64_t d = 0; d < durations[static_cast<size_t>(t)]; ++d) {
        for (int64_t f = 0; f < config.feat_dim; ++f) {
          float v = proto[f];
          if (config.noise_sigma > 0.0)
            v += static_cast<float>(config.noise_sigma * noise(rng));
          append_f32_le(bytes, v);
        }
      }
    }

    for (int64_t a : alpha_tokens) rec.x.push_back(vocab.content(a));
    if (config.task == "mapped") {
      for (int64_t a : alpha_tokens)
        rec.y.push_back(vocab.content(tmap[static_cast<size_t>(a)]));
    } else {
      rec.y = rec.x;
    }

    rec.path = "feats/" + rec.id + ".f32";
    write_file((fs::path(out_dir) / rec.path).string(), bytes);

    manifest_lines << json{{"id", rec.id},   {"frames", rec.frames},
                           {"dim", rec.dim}, {"x", rec.x},
                           {"y", rec.y},     {"path", rec.path}}
                          .dump()
                   << "\n";
    m.index[rec.id] = m.records.size();
    m.records.push_back(std::move(rec));
  }

  write_file((fs::path(out_dir) / "manifest.jsonl").string(),
             manifest_lines.str());
  write_file((fs::path(out_dir) / "meta.json").string(),
             gen_config_json(config).dump(2) + "\n");
  return m;
}

CorpusManifest load_manifest(const std::string& dir) {
  CorpusManifest m;
  m.root = dir;
  m.config = gen_config_from_json(
      json::parse(read_file((fs::path(dir) / "meta.json").string())));

  std::istringstream lines(
      read_file((fs::path(dir) / "manifest.jsonl").string()));
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    UtteranceRecord rec;
    rec.id = j.at("id").get<std::string>();
    rec.frames = j.at("frames").get<int64_t>();
    rec.dim = j.at("dim").get<int64_t>();
    rec.x = j.at("x").get<std::vector<int64_t>>();
    rec.y = j.at("y").get<std::vector<int64_t>>();
    rec.path = j.at("path").get<std::string>();
    m.index[rec.id] = m.records.size();
    m.records.push_back(std::move(rec));
  }
  return m;
}

std::vector<float> load_features(const CorpusManifest& m,
                                 const UtteranceRecord& rec) {
  const std::string bytes = read_file((fs::path(m.root) / rec.path).string());
  const size_t expect = static_cast<size_t>(rec.frames * rec.dim) * 4;
  if (bytes.size() != expect)
    throw std::runtime_error("feature file " + rec.path + " has " +
                             std::to_string(bytes.size()) +
                             " bytes, expected " + std::to_string(expect));
  std::vector<float> feats(static_cast<size_t>(rec.frames * rec.dim));
  for (size_t i = 0; i < feats.size(); ++i)
    feats[i] = read_f32_le(bytes.data() + i * 4);
  return feats;
}

const std::vector<float>& FeatureCache::get(const UtteranceRecord& rec) {
  auto it = store.find(rec.id);
  if (it != store.end()) return it->second;
  return store.emplace(rec.id, load_features(*manifest, rec)).first->second;
}

template <typename T>
void cmvn(T* feats, int64_t frames, int64_t dim, T eps) {
  if (frames < 1) throw std::invalid_argument("cmvn: frames must be >= 1");
  for (int64_t f = 0; f < dim; ++f) {
    T mean = 0;
    for (int64_t t = 0; t < frames; ++t) mean += feats[t * dim + f];
    mean /= static_cast<T>(frames);
    T var = 0;
    for (int64_t t = 0; t < frames; ++t) {
      const T d = feats[t * dim + f] - mean;
      var += d * d;
    }
    var /= static_cast<T>(frames);
    const T inv = T(1) / std::sqrt(var + eps);
    for (int64_t t = 0; t < frames; ++t)
      feats[t * dim + f] = (feats[t * dim + f] - mean) * inv;
  }
}

template void cmvn<float>(float*, int64_t, int64_t, float);
template void cmvn<double>(double*, int64_t, int64_t, double);

Batch make_batch(const CorpusManifest& m, const std::vector<std::string>& ids,
                 FeatureCache* cache) {
  if (ids.empty()) throw std::invalid_argument("make_batch: empty id list");
  Batch b;
  b.size = static_cast<int64_t>(ids.size());
  b.feat_dim = m.config.feat_dim;
  std::vector<const UtteranceRecord*> recs;
  for (const auto& id : ids) {
    recs.push_back(&m.record(id));
    b.max_frames = std::max(b.max_frames, recs.back()->frames);
  }
  b.features.assign(static_cast<size_t>(b.size * b.max_frames * b.feat_dim),
                    0.0f);
  for (int64_t r = 0; r < b.size; ++r) {
    const UtteranceRecord& rec = *recs[static_cast<size_t>(r)];
    std::vector<float> local;
    const std::vector<float>& feats =
        cache ? cache->get(rec) : (local = load_features(m, rec));
    std::copy(feats.begin(), feats.end(), b.row(r));
    b.frames.push_back(rec.frames);
    b.x.push_back(rec.x);
    std::vector<int64_t> framed;
    framed.reserve(rec.y.size() + 2);
    framed.push_back(Vocabulary::kBos);
    framed.insert(framed.end(), rec.y.begin(), rec.y.end());
    framed.push_back(Vocabulary::kEos);
    b.y.push_back(std::move(framed));
  }
  return b;
}

}  // namespace ipa
