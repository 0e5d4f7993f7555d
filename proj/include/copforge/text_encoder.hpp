#ifndef COPFORGE_TEXT_ENCODER_HPP_
#define COPFORGE_TEXT_ENCODER_HPP_

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "copforge/embedding.hpp"
#include "copforge/tai_render.hpp"

namespace copforge {

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual int dim() const = 0;
  virtual std::string id() const = 0;
  // Row i embeds texts[i]. Throws InvalidArgument on an empty list.
  virtual FloatMatrix Embed(std::span<const std::string> texts) = 0;
};

// Lowercased tokens: runs of letters/digits; '.' inside a number and a
// leading '-' before a digit belong to the number.
std::vector<std::string> Tokenize(std::string_view text);

// Feature-hashing encoder. Word tokens hash to one signed coordinate.
// Numbers additionally contribute a 0.01-resolution bucket and a linearly
// interpolated 0.1-resolution bucket, both keyed by the number's slot (the
// preceding word and the number's position after it), so nearby values share
// features and the x and y of a coordinate pair stay distinguishable.
class HashEncoder : public EmbeddingProvider {
 public:
  explicit HashEncoder(int dim = 256, uint64_t seed = 0);
  int dim() const override { return dim_; }
  std::string id() const override;
  FloatMatrix Embed(std::span<const std::string> texts) override;
  Eigen::RowVectorXf EmbedOne(std::string_view text) const;

 private:
  int dim_;
  uint64_t seed_;
};

// Binary cache: header {"LNCE", u32 version, u32 d_o, u64 count} followed by
// count records {16-byte digest, d_o little-endian float32}.
inline constexpr uint32_t kCacheVersion = 1;

class EmbeddingCache {
 public:
  // Loads an existing file. Throws IoError on a malformed file.
  static EmbeddingCache Load(const std::filesystem::path& path);
  explicit EmbeddingCache(int dim) : dim_(dim) {}

  int dim() const { return dim_; }
  size_t size() const { return rows_.size(); }
  const std::vector<float>* Find(const Digest& d) const;
  void Insert(const Digest& d, std::span<const float> row);

  // Appends records missing from the file under an exclusive lock, creating
  // the file if needed. Throws DimensionMismatch when the file's d_o differs.
  static void Append(const std::filesystem::path& path, int dim,
                     std::span<const Digest> digests, const FloatMatrix& rows);

 private:
  struct DigestHash {
    size_t operator()(const Digest& d) const;
  };
  int dim_;
  std::unordered_map<Digest, std::vector<float>, DigestHash> rows_;
};

// Looks texts up by content hash; never touches the network.
class CacheEncoder : public EmbeddingProvider {
 public:
  explicit CacheEncoder(const std::filesystem::path& path);
  int dim() const override { return cache_.dim(); }
  std::string id() const override { return "cache"; }
  // Throws MissingEmbedding naming the first absent digest.
  FloatMatrix Embed(std::span<const std::string> texts) override;

 private:
  EmbeddingCache cache_;
};

struct HttpEncoderOptions {
  std::string endpoint;  // e.g. http://127.0.0.1:8080/embed
  int dim = 256;
  double timeout_seconds = 10.0;
  int retries = 2;  // extra attempts after a timeout or 5xx status
  int batch_size = 64;
  std::filesystem::path cache_path;  // write-through target; empty disables
};

// Client for POST {"texts": [...]} -> {"embeddings": [[...], ...]}.
// ProviderError codes: "timeout", "connection", "http_status",
// "dimension_mismatch", "bad_response".
class HttpEncoder : public EmbeddingProvider {
 public:
  explicit HttpEncoder(HttpEncoderOptions options);
  int dim() const override { return options_.dim; }
  std::string id() const override { return "http:" + options_.endpoint; }
  FloatMatrix Embed(std::span<const std::string> texts) override;
  int requests_sent() const { return requests_sent_; }

 private:
  FloatMatrix Fetch(std::span<const std::string> texts);
  HttpEncoderOptions options_;
  std::string host_;
  std::string path_;
  int requests_sent_ = 0;
};

// Embeds the task text and node texts of one TAI in a single provider call.
EmbeddingMatrix EmbedInstance(EmbeddingProvider& provider, const TextAttributedInstance& tai);

// Embeds every distinct text of `tais` and appends it to the cache file.
// Returns the number of texts written.
size_t FillCache(EmbeddingProvider& provider, std::span<const TextAttributedInstance> tais,
                 const std::filesystem::path& path);

enum class ProviderKind { kHash, kCache, kHttp };
ProviderKind ParseProviderKind(std::string_view name);

struct ProviderConfig {
  ProviderKind kind = ProviderKind::kHash;
  int dim = 256;
  uint64_t seed = 0;
  std::filesystem::path cache_path;
  std::string endpoint;
  double timeout_seconds = 10.0;
  int retries = 2;
};

std::unique_ptr<EmbeddingProvider> MakeProvider(const ProviderConfig& config);

}  // namespace copforge

#endif  // COPFORGE_TEXT_ENCODER_HPP_
