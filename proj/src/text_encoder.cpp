#include "copforge/text_encoder.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <set>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "copforge/errors.hpp"
#include "copforge/rng.hpp"

namespace copforge {

static_assert(std::endian::native == std::endian::little,
              "cache records are written in host byte order");

namespace {

constexpr size_t kHeaderBytes = 4 + 4 + 4 + 8;
constexpr size_t kCountOffset = 12;
constexpr double kSoftBucketWeight = 1.0;

bool IsDigit(char c) { return c >= '0' && c <= '9'; }
bool IsAlnum(char c) { return IsDigit(c) || (c >= 'a' && c <= 'z'); }

char Lower(char c) { return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c; }

bool IsNumber(const std::string& tok) { return IsDigit(tok[0]) || tok[0] == '-'; }

// Exclusive flock on an open descriptor; released on destruction.
class FileLock {
 public:
  FileLock(const std::filesystem::path& path, int flags) {
    fd_ = ::open(path.c_str(), flags, 0644);
    if (fd_ < 0) throw IoError("cannot open " + path.string() + ": " + std::strerror(errno));
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      throw IoError("cannot lock " + path.string());
    }
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;
  int fd() const { return fd_; }

 private:
  int fd_;
};

void WriteAll(int fd, const void* data, size_t size, off_t offset) {
  const char* p = static_cast<const char*>(data);
  while (size > 0) {
    const ssize_t w = ::pwrite(fd, p, size, offset);
    if (w <= 0) throw IoError(std::string("cache write failed: ") + std::strerror(errno));
    p += w;
    size -= static_cast<size_t>(w);
    offset += w;
  }
}

std::string ReadAllFd(int fd) {
  std::string out;
  char buf[1 << 16];
  off_t offset = 0;
  for (;;) {
    const ssize_t r = ::pread(fd, buf, sizeof(buf), offset);
    if (r < 0) throw IoError("cache read failed");
    if (r == 0) break;
    out.append(buf, static_cast<size_t>(r));
    offset += r;
  }
  return out;
}

template <typename T>
T ReadScalar(const std::string& bytes, size_t offset) {
  T v;
  std::memcpy(&v, bytes.data() + offset, sizeof(T));
  return v;
}

struct ParsedCache {
  uint32_t dim = 0;
  uint64_t count = 0;
};

ParsedCache ParseHeader(const std::string& bytes, const std::string& name) {
  if (bytes.size() < kHeaderBytes || bytes.compare(0, 4, "LNCE") != 0) {
    throw IoError(name + " is not an embedding cache");
  }
  if (ReadScalar<uint32_t>(bytes, 4) != kCacheVersion) {
    throw IoError(name + " has unsupported cache version");
  }
  ParsedCache p{ReadScalar<uint32_t>(bytes, 8), ReadScalar<uint64_t>(bytes, kCountOffset)};
  const size_t record = 16 + 4 * static_cast<size_t>(p.dim);
  if (p.dim == 0 || bytes.size() != kHeaderBytes + p.count * record) {
    throw IoError(name + " is truncated or has trailing bytes");
  }
  return p;
}

}  // namespace

std::vector<std::string> Tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (size_t i = 0; i < text.size(); ++i) {
    const char c = Lower(text[i]);
    const bool next_digit = i + 1 < text.size() && IsDigit(text[i + 1]);
    if (IsAlnum(c)) {
      cur += c;
    } else if (c == '.' && !cur.empty() && IsNumber(cur) && IsDigit(cur.back()) && next_digit) {
      cur += c;
    } else if (c == '-' && cur.empty() && next_digit) {
      cur += c;
    } else {
      flush();
    }
  }
  flush();
  return out;
}

HashEncoder::HashEncoder(int dim, uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim <= 0) throw InvalidArgument("hash encoder dimension must be positive");
}

std::string HashEncoder::id() const {
  return "hash-v1:d" + std::to_string(dim_) + ":s" + std::to_string(seed_);
}

Eigen::RowVectorXf HashEncoder::EmbedOne(std::string_view text) const {
  Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(dim_);
  auto add = [&](const std::string& feature, double weight) {
    const uint64_t h = Mix64(seed_ ^ HashName(feature));
    acc[static_cast<Eigen::Index>(h % static_cast<uint64_t>(dim_))] +=
        (h >> 63) ? -weight : weight;
  };
  add("<text>", 1.0);
  std::string word = "<start>";
  int position = 0;
  for (const std::string& tok : Tokenize(text)) {
    if (!IsNumber(tok)) {
      add("w:" + tok, 1.0);
      word = tok;
      position = 0;
      continue;
    }
    add("n:" + tok, 1.0);
    double x = 0.0;
    const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), x);
    if (res.ec != std::errc() || !std::isfinite(x)) continue;
    const std::string slot = word + "#" + std::to_string(position++);
    add("b:" + slot + ":" + std::to_string(static_cast<long long>(std::floor(x * 100.0))), 1.0);
    const double t = x * 10.0;
    const double lo = std::floor(t);
    const double frac = t - lo;
    const long long lo_i = static_cast<long long>(lo);
    add("s:" + slot + ":" + std::to_string(lo_i), kSoftBucketWeight * (1.0 - frac));
    add("s:" + slot + ":" + std::to_string(lo_i + 1), kSoftBucketWeight * frac);
  }
  const double norm = acc.norm();
  if (norm > 0.0) acc /= norm;
  return acc.cast<float>();
}

FloatMatrix HashEncoder::Embed(std::span<const std::string> texts) {
  if (texts.empty()) throw InvalidArgument("embed requires at least one text");
  FloatMatrix out(static_cast<Eigen::Index>(texts.size()), dim_);
  for (size_t i = 0; i < texts.size(); ++i) out.row(i) = EmbedOne(texts[i]);
  return out;
}

size_t EmbeddingCache::DigestHash::operator()(const Digest& d) const {
  uint64_t h;
  std::memcpy(&h, d.data(), sizeof(h));
  return static_cast<size_t>(h);
}

EmbeddingCache EmbeddingCache::Load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("embedding cache " + path.string() + " not found");
  std::string bytes;
  {
    FileLock lock(path, O_RDONLY);
    bytes = ReadAllFd(lock.fd());
  }
  const ParsedCache p = ParseHeader(bytes, path.string());
  EmbeddingCache cache(static_cast<int>(p.dim));
  size_t offset = kHeaderBytes;
  std::vector<float> row(p.dim);
  for (uint64_t i = 0; i < p.count; ++i) {
    Digest d;
    std::memcpy(d.data(), bytes.data() + offset, 16);
    std::memcpy(row.data(), bytes.data() + offset + 16, 4 * row.size());
    offset += 16 + 4 * row.size();
    cache.Insert(d, row);
  }
  return cache;
}

const std::vector<float>* EmbeddingCache::Find(const Digest& d) const {
  auto it = rows_.find(d);
  return it == rows_.end() ? nullptr : &it->second;
}

void EmbeddingCache::Insert(const Digest& d, std::span<const float> row) {
  if (static_cast<int>(row.size()) != dim_) throw DimensionMismatch("cache row dimension");
  rows_.try_emplace(d, row.begin(), row.end());
}

void EmbeddingCache::Append(const std::filesystem::path& path, int dim,
                            std::span<const Digest> digests, const FloatMatrix& rows) {
  if (rows.rows() != static_cast<Eigen::Index>(digests.size()) || rows.cols() != dim) {
    throw DimensionMismatch("cache append shape mismatch");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FileLock lock(path, O_RDWR | O_CREAT);
  const std::string bytes = ReadAllFd(lock.fd());
  uint64_t count = 0;
  std::set<Digest> present;
  if (bytes.empty()) {
    std::string header = "LNCE";
    const uint32_t version = kCacheVersion;
    const uint32_t d = static_cast<uint32_t>(dim);
    header.append(reinterpret_cast<const char*>(&version), 4);
    header.append(reinterpret_cast<const char*>(&d), 4);
    header.append(reinterpret_cast<const char*>(&count), 8);
    WriteAll(lock.fd(), header.data(), header.size(), 0);
  } else {
    const ParsedCache p = ParseHeader(bytes, path.string());
    if (static_cast<int>(p.dim) != dim) {
      throw DimensionMismatch("cache " + path.string() + " has d_o " + std::to_string(p.dim) +
                              ", provider has " + std::to_string(dim));
    }
    count = p.count;
    const size_t record = 16 + 4 * static_cast<size_t>(dim);
    for (uint64_t i = 0; i < count; ++i) {
      Digest d;
      std::memcpy(d.data(), bytes.data() + kHeaderBytes + i * record, 16);
      present.insert(d);
    }
  }
  std::string payload;
  for (size_t i = 0; i < digests.size(); ++i) {
    if (!present.insert(digests[i]).second) continue;
    payload.append(reinterpret_cast<const char*>(digests[i].data()), 16);
    payload.append(reinterpret_cast<const char*>(rows.row(i).data()), 4 * static_cast<size_t>(dim));
    ++count;
  }
  if (payload.empty()) return;
  const off_t end = static_cast<off_t>(bytes.empty() ? kHeaderBytes : bytes.size());
  WriteAll(lock.fd(), payload.data(), payload.size(), end);
  WriteAll(lock.fd(), &count, sizeof(count), kCountOffset);
}

CacheEncoder::CacheEncoder(const std::filesystem::path& path) : cache_(EmbeddingCache::Load(path)) {}

FloatMatrix CacheEncoder::Embed(std::span<const std::string> texts) {
  if (texts.empty()) throw InvalidArgument("embed requires at least one text");
  FloatMatrix out(static_cast<Eigen::Index>(texts.size()), cache_.dim());
  for (size_t i = 0; i < texts.size(); ++i) {
    const Digest d = ContentDigest(texts[i]);
    const std::vector<float>* row = cache_.Find(d);
    if (row == nullptr) {
      throw MissingEmbedding("no cached embedding for digest " + DigestHex(d) +
                             "; run `copforge embed` with a live provider for these instances");
    }
    out.row(i) = Eigen::Map<const Eigen::RowVectorXf>(row->data(), cache_.dim());
  }
  return out;
}

HttpEncoder::HttpEncoder(HttpEncoderOptions options) : options_(std::move(options)) {
  const std::string& ep = options_.endpoint;
  const size_t scheme = ep.find("://");
  if (scheme == std::string::npos || ep.compare(0, scheme, "http") != 0) {
    throw InvalidArgument("endpoint must be an http:// URL, got '" + ep + "'");
  }
  const size_t slash = ep.find('/', scheme + 3);
  host_ = slash == std::string::npos ? ep : ep.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : ep.substr(slash);
  if (options_.dim <= 0 || options_.batch_size <= 0 || options_.retries < 0) {
    throw InvalidArgument("invalid http encoder options");
  }
}

FloatMatrix HttpEncoder::Fetch(std::span<const std::string> texts) {
  const std::string body =
      nlohmann::json{{"texts", std::vector<std::string>(texts.begin(), texts.end())}}.dump();
  const auto seconds = static_cast<time_t>(options_.timeout_seconds);
  const auto micros =
      static_cast<time_t>((options_.timeout_seconds - static_cast<double>(seconds)) * 1e6);
  ProviderError last("connection", "no attempt made");
  for (int attempt = 0; attempt <= options_.retries; ++attempt) {
    httplib::Client client(host_);
    client.set_connection_timeout(seconds, micros);
    client.set_read_timeout(seconds, micros);
    client.set_write_timeout(seconds, micros);
    ++requests_sent_;
    auto res = client.Post(path_, body, "application/json");
    if (!res) {
      const httplib::Error e = res.error();
      const bool timeout = e == httplib::Error::Read || e == httplib::Error::ConnectionTimeout ||
                           e == httplib::Error::Write;
      last = ProviderError(timeout ? "timeout" : "connection",
                           "request to " + options_.endpoint + " failed: " + httplib::to_string(e));
      continue;
    }
    if (res->status != 200) {
      last = ProviderError("http_status", "embedding service returned status " +
                                              std::to_string(res->status));
      if (res->status >= 500) continue;
      throw last;
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception&) {
      throw ProviderError("bad_response", "embedding service returned invalid JSON");
    }
    if (!j.contains("embeddings") || !j["embeddings"].is_array() ||
        j["embeddings"].size() != texts.size()) {
      throw ProviderError("bad_response", "response must hold one embedding per text");
    }
    FloatMatrix out(static_cast<Eigen::Index>(texts.size()), options_.dim);
    for (size_t i = 0; i < texts.size(); ++i) {
      const auto& row = j["embeddings"][i];
      if (!row.is_array() || static_cast<int>(row.size()) != options_.dim) {
        throw ProviderError("dimension_mismatch",
                            "embedding service returned dimension " +
                                std::to_string(row.is_array() ? row.size() : 0) + ", expected " +
                                std::to_string(options_.dim));
      }
      for (int k = 0; k < options_.dim; ++k) {
        if (!row[k].is_number()) throw ProviderError("bad_response", "non-numeric embedding entry");
        out(static_cast<Eigen::Index>(i), k) = row[k].get<float>();
      }
    }
    if (!out.allFinite()) throw ProviderError("bad_response", "non-finite embedding entry");
    return out;
  }
  throw last;
}

FloatMatrix HttpEncoder::Embed(std::span<const std::string> texts) {
  if (texts.empty()) throw InvalidArgument("embed requires at least one text");
  FloatMatrix out(static_cast<Eigen::Index>(texts.size()), options_.dim);
  for (size_t begin = 0; begin < texts.size(); begin += options_.batch_size) {
    const size_t count = std::min(texts.size() - begin, static_cast<size_t>(options_.batch_size));
    const FloatMatrix part = Fetch(texts.subspan(begin, count));
    out.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) = part;
  }
  if (!options_.cache_path.empty()) {
    std::vector<Digest> digests;
    for (const std::string& t : texts) digests.push_back(ContentDigest(t));
    EmbeddingCache::Append(options_.cache_path, options_.dim, digests, out);
  }
  return out;
}

EmbeddingMatrix EmbedInstance(EmbeddingProvider& provider, const TextAttributedInstance& tai) {
  std::vector<std::string> texts;
  texts.reserve(tai.node_texts.size() + 1);
  texts.push_back(tai.task_text);
  texts.insert(texts.end(), tai.node_texts.begin(), tai.node_texts.end());
  const FloatMatrix rows = provider.Embed(texts);
  if (rows.rows() != static_cast<Eigen::Index>(texts.size()) || rows.cols() != provider.dim()) {
    throw DimensionMismatch("provider returned a " + std::to_string(rows.rows()) + "x" +
                            std::to_string(rows.cols()) + " matrix");
  }
  EmbeddingMatrix m;
  m.task = rows.row(0);
  m.nodes = rows.bottomRows(rows.rows() - 1);
  m.provider_id = provider.id();
  m.template_version = tai.template_version;
  m.Validate(provider.dim(), static_cast<int>(tai.node_texts.size()));
  return m;
}

size_t FillCache(EmbeddingProvider& provider, std::span<const TextAttributedInstance> tais,
                 const std::filesystem::path& path) {
  std::vector<std::string> texts;
  std::set<Digest> seen;
  for (const TextAttributedInstance& t : tais) {
    auto consider = [&](const std::string& s) {
      if (seen.insert(ContentDigest(s)).second) texts.push_back(s);
    };
    consider(t.task_text);
    for (const std::string& s : t.node_texts) consider(s);
  }
  if (texts.empty()) return 0;
  const FloatMatrix rows = provider.Embed(texts);
  std::vector<Digest> digests;
  for (const std::string& s : texts) digests.push_back(ContentDigest(s));
  EmbeddingCache::Append(path, provider.dim(), digests, rows);
  return texts.size();
}

ProviderKind ParseProviderKind(std::string_view name) {
  if (name == "hash") return ProviderKind::kHash;
  if (name == "cache") return ProviderKind::kCache;
  if (name == "http") return ProviderKind::kHttp;
  throw InvalidArgument("unknown provider '" + std::string(name) + "' (hash|cache|http)");
}

std::unique_ptr<EmbeddingProvider> MakeProvider(const ProviderConfig& config) {
  switch (config.kind) {
    case ProviderKind::kHash:
      return std::make_unique<HashEncoder>(config.dim, config.seed);
    case ProviderKind::kCache:
      if (config.cache_path.empty()) throw InvalidArgument("cache provider needs --cache");
      return std::make_unique<CacheEncoder>(config.cache_path);
    case ProviderKind::kHttp: {
      if (config.endpoint.empty()) throw InvalidArgument("http provider needs --endpoint");
      HttpEncoderOptions o;
      o.endpoint = config.endpoint;
      o.dim = config.dim;
      o.timeout_seconds = config.timeout_seconds;
      o.retries = config.retries;
      o.cache_path = config.cache_path;
      return std::make_unique<HttpEncoder>(o);
    }
  }
  throw InvalidArgument("unknown provider kind");
}

}  // namespace copforge
