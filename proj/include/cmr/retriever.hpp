#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cmr/common.hpp"

namespace cmr {

std::uint64_t fnv1a64(std::string_view s);

/// Hashed bag-of-words embedding: each token hashed (FNV-1a 64-bit) into one
/// of `dim` buckets, counts accumulated, vector L2-normalized.
std::vector<double> embed_hashed_bow(const std::vector<std::string>& tokens,
                                     std::size_t dim);

enum class ProviderKind { kHashedBow, kExternalFile };

struct IndexEntry {
    std::string id;
    std::vector<std::string> words;
    std::string event_type;
    std::vector<double> embedding;
};

/// Immutable after build; scoring follows softmax over embedding dot
/// products. Concurrent reads are safe.
class RetrievalIndex {
  public:
    explicit RetrievalIndex(std::size_t embedding_dim = 256,
                            ProviderKind kind = ProviderKind::kHashedBow);

    std::size_t embedding_dim() const { return dim_; }
    ProviderKind provider_kind() const { return kind_; }
    std::size_t size() const { return entries_.size(); }
    const std::vector<IndexEntry>& entries() const { return entries_; }
    const IndexEntry& entry(const std::string& id) const;
    bool contains(const std::string& id) const;

    /// Hashed-BoW provider computes the embedding; throws on duplicate id.
    void add(const std::string& id, std::vector<std::string> words,
             std::string event_type);
    /// External provider: embedding supplied by the caller.
    void add_with_embedding(const std::string& id,
                            std::vector<std::string> words,
                            std::string event_type,
                            std::vector<double> embedding);

    std::vector<double> embed_query(
        const std::vector<std::string>& tokens) const;

  private:
    std::size_t dim_;
    ProviderKind kind_;
    std::vector<IndexEntry> entries_;
    std::map<std::string, std::size_t> by_id_;
};

/// Softmax-normalized similarity scores over the whole index; scores sum
/// to 1. Errors on an empty index.
std::map<std::string, double> score_all(const RetrievalIndex& index,
                                        const std::vector<double>& query_emb);

/// Top-k candidates by raw similarity, descending; ties broken by ascending
/// id; query's own id (when present) is excluded. k = 0 yields an empty
/// list; k > |index| yields everything eligible.
std::vector<std::string> retrieve_topk(const RetrievalIndex& index,
                                       const std::vector<std::string>& query,
                                       std::size_t k,
                                       const std::string& exclude_id = "");

/// Uniform sample without replacement, deterministic per seed, excluding
/// the query id. Errors when k exceeds the eligible candidate count.
std::vector<std::string> retrieve_random(const RetrievalIndex& index,
                                         std::size_t k, std::uint64_t seed,
                                         const std::string& exclude_id = "");

/// JSONL, one {"id": ..., "embedding": [...]} record per line.
std::map<std::string, std::vector<double>> load_external_embeddings(
    const std::string& path);

}  // namespace cmr
