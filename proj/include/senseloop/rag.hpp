#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "senseloop/agents.hpp"
#include "senseloop/datastore.hpp"
#include "senseloop/llm.hpp"

namespace senseloop {

/// Natural-language rendering of one (user, stream, window).
struct TextChunk {
  std::string id;  // "<user>/<stream>/<window start>"
  std::string text;
  std::string user_id;
  StreamKind stream = StreamKind::location;
  TimeRange range;

  bool operator==(const TextChunk&) const = default;
};

/// Renders every stream of `user_id` over `range` in windows of
/// `window_seconds`. Windows without data yield no chunk. Output is ordered
/// by window, then stream.
std::vector<TextChunk> textualize(const SensorStore& store, const std::string& user_id,
                                  const TimeRange& range, double window_seconds,
                                  const DisplayZone& zone);

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::string name() const = 0;
  virtual std::size_t dimension() const = 0;
  /// Unit-norm vector. Throws Error(validation) for text without tokens.
  virtual std::vector<double> embed(std::string_view text) const = 0;
};

/// Bag of words: lower-cased alphanumeric tokens hashed (FNV-1a) into a
/// fixed number of buckets, counted, then L2-normalized.
class LexicalEmbedder : public Embedder {
 public:
  explicit LexicalEmbedder(std::size_t dimension = 4096);
  std::string name() const override;
  std::size_t dimension() const override { return dimension_; }
  std::vector<double> embed(std::string_view text) const override;

  static std::vector<std::string> tokenize(std::string_view text);
  std::size_t bucket(std::string_view token) const;

 private:
  std::size_t dimension_;
};

/// OpenAI-compatible POST {base_url}/embeddings.
class RemoteEmbedder : public Embedder {
 public:
  RemoteEmbedder(RemoteConfig config, std::string model, std::size_t dimension);
  std::string name() const override { return "remote:" + model_; }
  std::size_t dimension() const override { return dimension_; }
  std::vector<double> embed(std::string_view text) const override;

 private:
  RemoteConfig config_;
  std::string model_;
  std::size_t dimension_;
};

struct ScoredChunk {
  TextChunk chunk;
  double score = 0;
  std::size_t position = 0;  // insertion index
};

/// Exact cosine search over unit vectors. Ties rank by insertion order.
class FlatIndex {
 public:
  explicit FlatIndex(std::size_t dimension, std::string embedder = "lexical");

  std::size_t dimension() const { return dimension_; }
  std::size_t size() const { return chunks_.size(); }
  const std::string& embedder() const { return embedder_; }
  const std::vector<TextChunk>& chunks() const { return chunks_; }
  const std::vector<double>& vector(std::size_t i) const { return vectors_.at(i); }

  /// Throws Error(validation) on a dimension mismatch.
  void add(TextChunk chunk, std::vector<double> vector);

  /// Top-k by cosine, descending. k larger than size() returns everything.
  /// Throws Error(state) on an empty index.
  std::vector<ScoredChunk> search(const std::vector<double>& query, std::size_t k) const;

  /// Versioned JSONL: a header line, then one line per chunk with its vector.
  void save(const std::filesystem::path& path) const;
  static FlatIndex load(const std::filesystem::path& path);

 private:
  std::size_t dimension_;
  std::string embedder_;
  std::vector<TextChunk> chunks_;
  std::vector<std::vector<double>> vectors_;
};

struct RagConfig {
  double window_seconds = 3600;
  std::size_t k = 8;
  std::string model = "gpt-4o";
  double temperature = 1.0;
  double top_p = 1.0;
};

struct RagAnswer {
  std::string text;
  std::vector<std::string> chunk_ids;
  std::vector<double> scores;
  std::vector<std::string> unsupported_numbers;  // numbers absent from query and context
  bool model_called = false;
};

nlohmann::json to_json(const RagAnswer& answer);

class RagBaseline {
 public:
  RagBaseline(ChatBackend& backend, const Embedder& embedder, RagConfig config = {},
              PromptSet prompts = PromptSet::builtin());

  FlatIndex build_index(const SensorStore& store, const std::string& user_id,
                        const TimeRange& range, const DisplayZone& zone) const;

  std::vector<ScoredChunk> retrieve(const FlatIndex& index, const std::string& query) const;

  /// One completion over the top-k chunks. An empty index produces a fixed
  /// no-data answer without calling the model.
  RagAnswer answer(const std::string& query, const FlatIndex& index,
                   const std::string& instructions = "answer clearly and concisely") const;

  const RagConfig& config() const { return config_; }

 private:
  ChatBackend& backend_;
  const Embedder& embedder_;
  RagConfig config_;
  PromptSet prompts_;
};

}  // namespace senseloop
