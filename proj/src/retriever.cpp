#include "cmr/retriever.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "cmr/rng.hpp"

namespace cmr {

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::vector<double> embed_hashed_bow(const std::vector<std::string>& tokens,
                                     std::size_t dim) {
    if (tokens.empty())
        throw ValueError("embed: empty token list");
    std::vector<double> v(dim, 0.0);
    for (const std::string& t : tokens) v[fnv1a64(t) % dim] += 1.0;
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    return v;
}

RetrievalIndex::RetrievalIndex(std::size_t embedding_dim, ProviderKind kind)
    : dim_(embedding_dim), kind_(kind) {}

const IndexEntry& RetrievalIndex::entry(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end())
        throw ValueError("retrieval index: unknown id '" + id + "'");
    return entries_[it->second];
}

bool RetrievalIndex::contains(const std::string& id) const {
    return by_id_.count(id) != 0;
}

void RetrievalIndex::add(const std::string& id,
                         std::vector<std::string> words,
                         std::string event_type) {
    if (kind_ != ProviderKind::kHashedBow)
        throw ValueError("retrieval index: external provider needs an "
                         "embedding; use add_with_embedding");
    std::vector<double> emb = embed_hashed_bow(words, dim_);
    add_with_embedding(id, std::move(words), std::move(event_type),
                       std::move(emb));
}

void RetrievalIndex::add_with_embedding(const std::string& id,
                                        std::vector<std::string> words,
                                        std::string event_type,
                                        std::vector<double> embedding) {
    if (by_id_.count(id))
        throw ValueError("retrieval index: duplicate id '" + id + "'");
    if (embedding.size() != dim_)
        throw ShapeError("retrieval index: embedding dim " +
                         std::to_string(embedding.size()) + " != " +
                         std::to_string(dim_));
    for (double x : embedding)
        if (!std::isfinite(x))
            throw NumericError("retrieval index: non-finite embedding for '" +
                               id + "'");
    by_id_[id] = entries_.size();
    entries_.push_back(IndexEntry{id, std::move(words), std::move(event_type),
                                  std::move(embedding)});
}

std::vector<double> RetrievalIndex::embed_query(
    const std::vector<std::string>& tokens) const {
    return embed_hashed_bow(tokens, dim_);
}

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

// (score desc, id asc) ordering over all eligible entries
std::vector<std::pair<double, std::string>> ranked(
    const RetrievalIndex& index, const std::vector<double>& query_emb,
    const std::string& exclude_id) {
    std::vector<std::pair<double, std::string>> out;
    out.reserve(index.size());
    for (const IndexEntry& e : index.entries()) {
        if (e.id == exclude_id) continue;  // no self-retrieval
        out.emplace_back(dot(query_emb, e.embedding), e.id);
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    return out;
}

}  // namespace

std::map<std::string, double> score_all(const RetrievalIndex& index,
                                        const std::vector<double>& query_emb) {
    if (index.size() == 0) throw ValueError("score_all: empty index");
    if (query_emb.size() != index.embedding_dim())
        throw ShapeError("score_all: query dim " +
                         std::to_string(query_emb.size()) + " != " +
                         std::to_string(index.embedding_dim()));
    std::vector<double> f;
    f.reserve(index.size());
    double mx = -1e300;
    for (const IndexEntry& e : index.entries()) {
        f.push_back(dot(query_emb, e.embedding));
        mx = std::max(mx, f.back());
    }
    double denom = 0.0;
    for (double& x : f) {
        x = std::exp(x - mx);
        denom += x;
    }
    std::map<std::string, double> scores;
    for (std::size_t i = 0; i < f.size(); ++i)
        scores[index.entries()[i].id] = f[i] / denom;
    return scores;
}

std::vector<std::string> retrieve_topk(const RetrievalIndex& index,
                                       const std::vector<std::string>& query,
                                       std::size_t k,
                                       const std::string& exclude_id) {
    if (k == 0) return {};
    auto order = ranked(index, index.embed_query(query), exclude_id);
    if (k > order.size()) k = order.size();
    std::vector<std::string> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back(order[i].second);
    return out;
}

std::vector<std::string> retrieve_random(const RetrievalIndex& index,
                                         std::size_t k, std::uint64_t seed,
                                         const std::string& exclude_id) {
    std::vector<std::string> ids;
    ids.reserve(index.size());
    for (const IndexEntry& e : index.entries())
        if (e.id != exclude_id) ids.push_back(e.id);
    std::sort(ids.begin(), ids.end());
    if (k > ids.size())
        throw ValueError("retrieve_random: k=" + std::to_string(k) +
                         " exceeds " + std::to_string(ids.size()) +
                         " eligible candidates");
    Rng rng(seed);
    rng.shuffle(ids);
    ids.resize(k);
    return ids;
}

std::map<std::string, std::vector<double>> load_external_embeddings(
    const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open embedding file " + path);
    std::map<std::string, std::vector<double>> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        std::string id = j.at("id").get<std::string>();
        std::vector<double> emb = j.at("embedding").get<std::vector<double>>();
        if (out.count(id))
            throw ValueError("embedding file line " + std::to_string(lineno) +
                             ": duplicate id '" + id + "'");
        out[id] = std::move(emb);
    }
    return out;
}

}  // namespace cmr
