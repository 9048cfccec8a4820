#pragma once

// Allocation ledger behind the memory benchmark: every buffer on the
// measured path whose size could scale with sequence length registers
// its bytes here, so peak live usage can be compared against the
// analytic model without OS-level probing.

#include <cstddef>

#include "longvid/common.hpp"

namespace longvid::bench {

class AllocLedger {
public:
    void acquire(size_t bytes) {
        live_ += bytes;
        if (live_ > peak_) peak_ = live_;
    }

    void release(size_t bytes) {
        if (bytes > live_) {
            throw ConfigError("alloc ledger: releasing " + std::to_string(bytes) +
                              " bytes with only " + std::to_string(live_) + " live");
        }
        live_ -= bytes;
    }

    size_t live_bytes() const { return live_; }
    size_t peak_bytes() const { return peak_; }

    void reset() {
        live_ = 0;
        peak_ = 0;
    }

private:
    size_t live_ = 0;
    size_t peak_ = 0;
};

// holds a registration for the lifetime of a scope
class LedgerHold {
public:
    LedgerHold(AllocLedger& ledger, size_t bytes) : ledger_(ledger), bytes_(bytes) {
        ledger_.acquire(bytes_);
    }
    ~LedgerHold() { ledger_.release(bytes_); }

    LedgerHold(const LedgerHold&) = delete;
    LedgerHold& operator=(const LedgerHold&) = delete;

private:
    AllocLedger& ledger_;
    size_t bytes_;
};

}  // namespace longvid::bench
