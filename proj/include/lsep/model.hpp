// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lsep/common.hpp"
#include "lsep/tensor.hpp"

namespace lsep::model {

// Patch-transformer geometry and conditioning setup. `null_label_id` is
// always num_classes: the embedding table carries one extra row for the
// unconditional token c_null.
struct ModelConfig {
    int64_t input_channels = 3;
    int64_t input_size = 32;
    int64_t patch_size = 4;
    int64_t depth = 6;
    int64_t hidden_dim = 192;
    int64_t num_heads = 3;
    int64_t num_classes = 10;
    int64_t target_depth = 2;  // 1-based probe tap k

    int64_t null_label_id() const { return num_classes; }
    int64_t grid() const { return input_size / patch_size; }
    int64_t tokens() const { return grid() * grid(); }
    int64_t patch_dim() const { return input_channels * patch_size * patch_size; }

    // Throws ValidationError when geometry or depth constraints fail.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Architecture presets. "tiny" is the desk-scale default; "B", "L" and
// "XL" match the published transformer sizes (patch 2 on a 32x32x4
// latent grid, 1000 classes).
ModelConfig arch_preset(const std::string& name);

struct NamedParam {
    std::string name;
    nn::Tensor tensor;
};

// SiT-style diffusion transformer: patchify + linear embed, fixed 2D
// sin/cos positional table, sinusoidal time embedding through a SiLU MLP,
// class-embedding table, adaLN-zero blocks, zero-initialized final
// projection back to patches.
class DitModel {
public:
    DitModel(ModelConfig cfg, uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }
    std::vector<NamedParam>& params() { return params_; }
    const std::vector<NamedParam>& params() const { return params_; }
    nn::Tensor param(const std::string& name) const;  // throws if missing
    int64_t param_count() const;
    // FNV-1a over every parameter value in declaration order.
    uint64_t param_digest() const;
    const std::vector<double>& pos_embed() const { return pos_embed_; }

    // Summed time + class conditioning vector, (batch, hidden_dim).
    // Labels may include null_label_id; anything outside [0, num_classes]
    // is rejected.
    nn::Tensor condition_vector(const std::vector<double>& t,
                                const std::vector<int>& labels) const;

    // Patchify + project + positional table: (batch*T, hidden_dim).
    nn::Tensor embed_tokens(const nn::Tensor& x_t) const;

    // Runs blocks [first, last) (0-based) over tokens. Each block output is
    // checked for non-finite values; failures raise NumericalError carrying
    // the 0-based block index.
    nn::Tensor blocks_forward(nn::Tensor tokens, const nn::Tensor& cond, int64_t first,
                              int64_t last, int64_t batch,
                              std::vector<nn::Tensor>* capture = nullptr) const;

    // Hidden features after block k (1-based), conditioning chosen
    // independently of any denoising pass.
    nn::Tensor forward_to_depth(const nn::Tensor& x_t, const std::vector<double>& t,
                                const std::vector<int>& labels, int64_t k) const;

    // Full v-prediction pass; output shape equals x_t. When `capture` is
    // given it receives every block's output tokens in order.
    nn::Tensor forward_velocity(const nn::Tensor& x_t, const std::vector<double>& t,
                                const std::vector<int>& labels,
                                std::vector<nn::Tensor>* capture = nullptr) const;

private:
    nn::Tensor block_forward(nn::Tensor x, const nn::Tensor& cond, int64_t index,
                             int64_t batch) const;
    void check_input(const nn::Tensor& x_t, const std::vector<double>& t,
                     const std::vector<int>& labels) const;

    ModelConfig cfg_;
    std::vector<NamedParam> params_;
    std::vector<double> pos_embed_;  // fixed buffer (T, hidden_dim), not trained
};

// Fixed tables, exposed for tests.
std::vector<double> sincos_pos_embed_2d(int64_t grid, int64_t dim);
std::vector<double> time_embedding(const std::vector<double>& t, int64_t dim);

}  // namespace lsep::model
