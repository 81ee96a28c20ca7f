#pragma once

#include <cstdint>
#include <deque>
#include <stdexcept>
#include <vector>

#include "cmp/rng.hpp"

namespace cmp {

/// Algorithm-R reservoir over stream sample ids. Stores raw input ids,
/// never embeddings; embeddings go stale as the encoder moves.
class ReservoirBuffer {
public:
    ReservoirBuffer(std::size_t capacity, std::uint64_t seed)
        : capacity_(capacity), rng_(hash64(seed, "reservoir")) {}

    void insert(std::size_t item) {
        if (slots_.size() < capacity_) {
            slots_.push_back(item);
        } else if (capacity_ > 0) {
            std::uint64_t j = rng_.next_below(seen_ + 1);
            if (j < capacity_) slots_[static_cast<std::size_t>(j)] = item;
        }
        ++seen_;
    }

    /// min(k, size) uniform draws without replacement; an under-filled
    /// buffer simply yields fewer replay samples (cold-start contract).
    std::vector<std::size_t> sample(std::size_t k, Rng& rng) const {
        std::vector<std::size_t> out;
        if (slots_.empty() || k == 0) return out;
        if (slots_.size() <= k) return slots_;
        std::vector<std::size_t> pool = slots_;
        for (std::size_t i = 0; i < k; ++i) {
            std::size_t j = i + static_cast<std::size_t>(rng.next_below(pool.size() - i));
            std::swap(pool[i], pool[j]);
            out.push_back(pool[i]);
        }
        return out;
    }

    std::size_t size() const { return slots_.size(); }
    std::size_t seen() const { return seen_; }
    std::size_t capacity() const { return capacity_; }
    const std::vector<std::size_t>& slots() const { return slots_; }

    void restore(std::vector<std::size_t> slots, std::size_t seen) {
        slots_ = std::move(slots);
        seen_ = seen;
    }

private:
    std::size_t capacity_;
    std::size_t seen_ = 0;
    std::vector<std::size_t> slots_;
    Rng rng_;
};

/// Queue of the most recent items, arrival order preserved.
class FifoBuffer {
public:
    explicit FifoBuffer(std::size_t capacity) : capacity_(capacity) {}

    void push(std::size_t item) {
        queue_.push_back(item);
        ++pushed_;
        while (queue_.size() > capacity_) queue_.pop_front();
    }

    /// FIFO replay is the whole buffer: its size is the replay quota.
    std::vector<std::size_t> contents() const { return {queue_.begin(), queue_.end()}; }

    std::size_t size() const { return queue_.size(); }
    std::size_t pushed() const { return pushed_; }
    std::size_t capacity() const { return capacity_; }

    void restore(std::vector<std::size_t> items, std::size_t pushed) {
        queue_.assign(items.begin(), items.end());
        pushed_ = pushed;
    }

private:
    std::size_t capacity_;
    std::size_t pushed_ = 0;
    std::deque<std::size_t> queue_;
};

/// Concatenation, stream batch first; ordering is part of the determinism
/// contract.
inline std::vector<std::size_t> assemble_er_batch(const std::vector<std::size_t>& stream_batch,
                                                  const std::vector<std::size_t>& replay) {
    std::vector<std::size_t> out = stream_batch;
    out.insert(out.end(), replay.begin(), replay.end());
    return out;
}

}  // namespace cmp
