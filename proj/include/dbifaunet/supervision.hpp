#pragma once

#include <vector>

#include <torch/torch.h>

namespace dbifaunet {

/// Probability maps produced at the supervision points of one forward pass.
/// u_heads[j-1] taps the upsampling endpoint X(0,j); b_heads[j-1] taps the
/// fusion output feeding X(0,j). `final` is u_heads.back().
struct SupervisionOutputs {
    std::vector<torch::Tensor> u_heads;
    std::vector<torch::Tensor> b_heads;
    torch::Tensor final;
};

} // namespace dbifaunet
