#pragma once

// Training losses.
//
//   ce_loss      -(1/C) sum_c target_c log(pred_c), averaged over the batch
//   kd_loss      ce_loss against a detached teacher prediction
//   kd_act_loss  kd_loss + beta * (1/N) ||a_student - a_teacher||^2
//
// Predictions are post-softmax [B, C] rows. Activation vectors are [B, N] in
// full-model channel coordinates, zero where the student switch has no
// channel.

#include <cmath>
#include <cstddef>
#include <vector>

#include "paradis/autodiff.hpp"
#include "paradis/error.hpp"

namespace paradis {

template <typename T>
Tensor<T> one_hot(const std::vector<int>& labels, std::size_t classes) {
    Tensor<T> t(Shape{labels.size(), classes});
    for (std::size_t b = 0; b < labels.size(); ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes)
            throw ShapeError("label " + std::to_string(labels[b]) + " outside " + std::to_string(classes) + " classes");
        t.at(b, static_cast<std::size_t>(labels[b])) = T(1);
    }
    return t;
}

// Rows are probability vectors: entries >= 0 summing to 1 within tol.
template <typename T>
bool is_prediction(const Tensor<T>& p, double tol = 1e-5) {
    if (p.rank() != 2) return false;
    for (std::size_t b = 0; b < p.dim(0); ++b) {
        double s = 0;
        for (std::size_t c = 0; c < p.dim(1); ++c) {
            if (p.at(b, c) < T(0)) return false;
            s += p.at(b, c);
        }
        if (std::abs(s - 1.0) > tol) return false;
    }
    return true;
}

template <typename T>
Var<T> ce_loss(Var<T> pred, Var<T> target) {
    return ops::cross_entropy(pred, target);
}

template <typename T>
Var<T> kd_loss(Var<T> student, Var<T> teacher) {
    return ce_loss(student, student.graph->detach(teacher));
}

template <typename T>
Var<T> kd_loss(Var<T> student, const Tensor<T>& teacher) {
    return ce_loss(student, student.graph->constant(teacher));
}

// Batch mean of (1/N) ||s - t||^2 with N the activation width.
template <typename T>
Var<T> activation_mse(Var<T> student_act, Var<T> teacher_act) {
    if (student_act.shape() != teacher_act.shape())
        throw ShapeError("activation vectors differ: " + to_string(student_act.shape()) + " vs " +
                         to_string(teacher_act.shape()));
    return ops::mean(ops::square(ops::sub(student_act, teacher_act)));
}

template <typename T>
Var<T> kd_act_loss(Var<T> student_pred, Var<T> teacher_pred, Var<T> student_act, Var<T> teacher_act, T beta) {
    Graph<T>& g = *student_pred.graph;
    Var<T> kd = kd_loss(student_pred, teacher_pred);
    Var<T> mse = activation_mse(student_act, g.detach(teacher_act));
    return ops::add(kd, ops::scale(mse, beta));
}

template <typename T>
Var<T> kd_act_loss(Var<T> student_pred, const Tensor<T>& teacher_pred, Var<T> student_act, const Tensor<T>& teacher_act,
                   T beta) {
    Graph<T>& g = *student_pred.graph;
    return kd_act_loss(student_pred, g.constant(teacher_pred), student_act, g.constant(teacher_act), beta);
}

}  // namespace paradis
