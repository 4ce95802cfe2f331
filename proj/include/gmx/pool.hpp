#pragma once

// Per-phone pools of (phone, mfcc slice, deep slice, gop) quadruplets.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <span>
#include <thread>
#include <vector>

#include "gmx/core.hpp"
#include "gmx/gop.hpp"
#include "gmx/rng.hpp"

namespace gmx {

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Each index is
/// processed exactly once; callers write results into slot i.
inline void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Quadruplets of one utterance, in alignment order.
inline std::vector<Quadruplet> utterance_quadruplets(const UtteranceRecord& rec, const PhoneClassMap& map,
                                                     GopVariant variant = GopVariant::mean_posterior) {
  validate_utterance(rec);
  const auto gops = utterance_gops(rec, map, variant);
  std::vector<Quadruplet> out;
  out.reserve(gops.size());
  for (const auto& [seg, gop] : gops)
    out.push_back({seg.phone, rec.mfcc.slice_rows(seg.start, seg.end), rec.deep.slice_rows(seg.start, seg.end), gop});
  return out;
}

/// Incremental pool construction; insertion order is corpus traversal order.
class PoolBuilder {
 public:
  PoolBuilder(PhoneInventory inventory, const PhoneClassMap& map, GopVariant variant = GopVariant::mean_posterior)
      : pools_(std::move(inventory)), map_(map), variant_(variant) {}

  void add(const UtteranceRecord& rec) { add_quadruplets(utterance_quadruplets(rec, map_, variant_)); }

  void add_quadruplets(std::vector<Quadruplet> quads) {
    for (auto& q : quads) pools_.add(std::move(q));
  }

  PhonePoolSet finish() && { return std::move(pools_); }

 private:
  PhonePoolSet pools_;
  const PhoneClassMap& map_;
  GopVariant variant_;
};

/// Builds the pool set from a corpus. Utterances are processed on up to
/// `workers` threads and merged in corpus order, so the result does not
/// depend on the worker count.
inline PhonePoolSet build_pool(std::span<const UtteranceRecord> corpus, const PhoneInventory& inventory,
                               const PhoneClassMap& map, GopVariant variant = GopVariant::mean_posterior,
                               unsigned workers = 1) {
  std::vector<std::vector<Quadruplet>> shards(corpus.size());
  parallel_for(corpus.size(), workers,
               [&](std::size_t i) { shards[i] = utterance_quadruplets(corpus[i], map, variant); });
  PoolBuilder builder(inventory, map, variant);
  for (auto& s : shards) builder.add_quadruplets(std::move(s));
  return std::move(builder).finish();
}

/// Uniform draw with replacement from the phone's pool.
inline const Quadruplet& sample_quadruplet(const PhonePoolSet& pools, PhoneId phone, Rng& rng) {
  const auto pool = pools.pool(phone);
  if (pool.empty()) {
    const std::string name =
        phone.index < pools.inventory().size() ? pools.inventory().symbol(phone) : std::to_string(phone.index);
    throw Error(Errc::empty_input, "pool for phone '" + name + "' is empty or missing");
  }
  return pool[static_cast<std::size_t>(rng.index(pool.size()))];
}

inline constexpr std::size_t kLongSegmentFrames = 200;

struct PoolPhoneStats {
  PhoneId phone;
  std::size_t count = 0;
  double mean_gop = 0.0;
  double mean_frames = 0.0;
  std::size_t long_segments = 0;  // > kLongSegmentFrames, kept in the pool
};

/// One row per inventory phone; empty pools report count 0.
inline std::vector<PoolPhoneStats> pool_stats(const PhonePoolSet& pools) {
  std::vector<PoolPhoneStats> out;
  out.reserve(pools.phone_count());
  for (std::uint32_t i = 0; i < pools.phone_count(); ++i) {
    PoolPhoneStats st{PhoneId{i}};
    const auto pool = pools.pool(st.phone);
    st.count = pool.size();
    double gop = 0.0, frames = 0.0;
    for (const auto& q : pool) {
      gop += q.gop;
      frames += static_cast<double>(q.frames());
      if (q.frames() > kLongSegmentFrames) ++st.long_segments;
    }
    if (st.count > 0) {
      st.mean_gop = gop / static_cast<double>(st.count);
      st.mean_frames = frames / static_cast<double>(st.count);
    }
    out.push_back(st);
  }
  return out;
}

}  // namespace gmx
