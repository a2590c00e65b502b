#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gbt/tensor.hpp"

namespace gbt {

struct FdOptions {
    double h = 1e-3;
    double tol = 1e-4;
    int min_coords = 50;
    std::uint64_t seed = 1;
};

struct FdReport {
    std::string name;
    int coords_checked = 0;
    double max_rel_err = 0.0;
    bool pass = false;
};

/// Central finite-difference check of an op's backward against a weighted
/// sum-of-outputs scalar loss. `forward` maps the input list to the output
/// tensor; `backward` maps (inputs, upstream grad) to per-input gradients.
/// Coordinates are sampled across all inputs; an optional per-input
/// coordinate filter restricts sampling (used for sparse ops, whose
/// inactive coordinates carry exactly-zero gradients by contract).
struct FdProblem {
    std::string name;
    std::vector<Tensor5> inputs;
    std::function<Tensor5(const std::vector<Tensor5>&)> forward;
    std::function<std::vector<Tensor5>(const std::vector<Tensor5>&,
                                       const Tensor5&)>
        backward;
    std::vector<std::vector<std::uint8_t>> coord_filter;  // optional, per input
};

FdReport finite_diff_check(const FdProblem& problem, const FdOptions& options);

/// Same check for a scalar-valued loss with its own gradient.
struct FdLossProblem {
    std::string name;
    std::vector<Tensor5> inputs;
    std::function<double(const std::vector<Tensor5>&)> value;
    std::function<std::vector<Tensor5>(const std::vector<Tensor5>&)> gradient;
    std::vector<std::vector<std::uint8_t>> coord_filter;
};

FdReport finite_diff_check(const FdLossProblem& problem,
                           const FdOptions& options);

/// The full kernel sweep behind the `gradcheck` subcommand: dense conv
/// (k1/k3, s1/s2), instance norm, leaky-relu, upsample_concat, sparse conv,
/// sparse batch norm, and both losses.
std::vector<FdReport> run_standard_gradcheck(std::uint64_t seed, double tol);

}  // namespace gbt
