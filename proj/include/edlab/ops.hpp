#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "edlab/tape.hpp"

// Differentiable primitives. Each op validates shapes, computes its value
// eagerly and, when any input needs a gradient, records the backward rule.
// Instantiated for float and double.
namespace edlab::ops {

// [m×k] · [k×n] -> [m×n]
template <class T>
Var matmul(Tape<T>& tape, Var a, Var b);

template <class T>
Var add(Tape<T>& tape, Var a, Var b);

// Elementwise product of equal shapes.
template <class T>
Var mul(Tape<T>& tape, Var a, Var b);

template <class T>
Var scale(Tape<T>& tape, Var a, double factor);

// Sum of all entries -> shape [1].
template <class T>
Var sum(Tape<T>& tape, Var a);

// Row-wise layer normalisation of x[N×d]; params is [2×d] holding gain then bias.
template <class T>
Var layernorm(Tape<T>& tape, Var x, Var params);

template <class T>
Var gelu(Tape<T>& tape, Var x);

// Row-wise softmax of x[N×C].
template <class T>
Var softmax(Tape<T>& tape, Var x);

// Rows of table[V×d] picked by ids -> [len(ids)×d].
template <class T>
Var embedding(Tape<T>& tape, Var table, std::span<const int> ids);

// Rows of x at the given indices (duplicates allowed).
template <class T>
Var select_rows(Tape<T>& tape, Var x, std::span<const std::size_t> rows);

// Multi-head causal self-attention over packed sequences. q, k, v are [N×d];
// sequence s occupies rows [offsets[s], offsets[s+1]) and attends only within
// itself. Scores are scaled by 1/sqrt(d/n_heads).
template <class T>
Var causal_attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t n_heads,
                     std::span<const std::size_t> offsets);

// Σ_t weights[t] · (−log softmax(logits[t])[targets[t]]), accumulated in double.
template <class T>
Var cross_entropy(Tape<T>& tape, Var logits, std::span<const int> targets, std::span<const double> weights);

// Mean negative log-likelihood over positions where mask is true.
template <class T>
Var masked_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> targets, const std::vector<bool>& mask);

}  // namespace edlab::ops
