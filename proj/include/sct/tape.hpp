#pragma once

#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "sct/tensor.hpp"

namespace sct {

// Reverse-mode tape. Operations append a closure that scatters the output
// gradient into their inputs; backward() replays the closures in exact
// reverse execution order. Gradients accumulate additively, so a tensor
// feeding multiple consumers receives the sum of all path gradients.
class Tape {
  public:
    bool recording() const { return recording_; }
    void set_recording(bool b) { recording_ = b; }

    template <typename F>
    void record(F&& backward_fn) {
        if (recording_) records_.emplace_back(std::forward<F>(backward_fn));
    }

    std::size_t size() const { return records_.size(); }

    void backward(Tensor& loss) {
        if (loss.numel() != 1) {
            throw std::invalid_argument("Tape::backward: loss must be scalar, got " +
                                        loss.shape().str());
        }
        if (backward_done_) {
            throw std::logic_error(
                "Tape::backward called twice without a fresh forward; clear() the tape first");
        }
        backward_done_ = true;
        loss.grad()[0] += 1.0f;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    }

    void clear() {
        records_.clear();
        backward_done_ = false;
    }

  private:
    std::vector<std::function<void()>> records_;
    bool recording_ = true;
    bool backward_done_ = false;
};

// Scoped recording switch for eval-mode forwards over a shared tape.
class RecordingGuard {
  public:
    RecordingGuard(Tape& tape, bool on) : tape_(tape), prev_(tape.recording()) {
        tape_.set_recording(on);
    }
    ~RecordingGuard() { tape_.set_recording(prev_); }

  private:
    Tape& tape_;
    bool prev_;
};

}  // namespace sct
