#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "xcal/errors.hpp"

namespace xcal {

// Exact 2D k-nearest-neighbour index. Median-split build over an index
// permutation, bounded max-heap search. Distance ties break toward the
// smaller point index, which pins the neighbour set (and therefore every
// regression output) uniquely even with duplicated locations.
class KdTree2d {
 public:
  struct Neighbor {
    int index = -1;
    double dist_sq = 0.0;
  };

  KdTree2d() = default;

  explicit KdTree2d(std::vector<Eigen::Vector2d> points) : points_(std::move(points)) {
    std::vector<int> order(points_.size());
    std::iota(order.begin(), order.end(), 0);
    nodes_.reserve(points_.size());
    if (!order.empty()) root_ = build(order, 0, static_cast<int>(order.size()));
  }

  std::size_t size() const { return points_.size(); }
  const std::vector<Eigen::Vector2d>& points() const { return points_; }

  /// The k nearest points to `query`, ascending by (distance, index).
  std::vector<Neighbor> knn(const Eigen::Vector2d& query, int k) const {
    if (k <= 0) throw ValidationError("knn requires k >= 1");
    if (static_cast<std::size_t>(k) > points_.size()) {
      throw InsufficientSamples("knn: k=" + std::to_string(k) + " exceeds " +
                                std::to_string(points_.size()) + " indexed points");
    }
    Heap heap(k);
    search(root_, query, heap);
    std::vector<Neighbor> out = std::move(heap.items);
    std::sort(out.begin(), out.end(), [](const Neighbor& a, const Neighbor& b) {
      return a.dist_sq != b.dist_sq ? a.dist_sq < b.dist_sq : a.index < b.index;
    });
    return out;
  }

 private:
  struct Node {
    int point = -1;  // leaf payload when axis < 0, else the splitting point
    int axis = -1;
    int left = -1;
    int right = -1;
  };

  // Max-heap on (dist_sq, index): the root is the worst kept neighbour.
  struct Heap {
    explicit Heap(int k) : capacity(k) { items.reserve(k); }

    static bool closer(const Neighbor& a, const Neighbor& b) {
      return a.dist_sq != b.dist_sq ? a.dist_sq < b.dist_sq : a.index < b.index;
    }

    bool full() const { return static_cast<int>(items.size()) == capacity; }
    const Neighbor& worst() const { return items.front(); }

    void offer(const Neighbor& n) {
      if (!full()) {
        items.push_back(n);
        std::push_heap(items.begin(), items.end(), closer);
      } else if (closer(n, worst())) {
        std::pop_heap(items.begin(), items.end(), closer);
        items.back() = n;
        std::push_heap(items.begin(), items.end(), closer);
      }
    }

    int capacity;
    std::vector<Neighbor> items;
  };

  int build(std::vector<int>& order, int begin, int end) {
    const int axis = pick_axis(order, begin, end);
    const int mid = begin + (end - begin) / 2;
    std::nth_element(order.begin() + begin, order.begin() + mid, order.begin() + end,
                     [&](int a, int b) {
                       const double ca = points_[a][axis], cb = points_[b][axis];
                       return ca != cb ? ca < cb : a < b;
                     });
    Node node;
    node.point = order[mid];
    node.axis = axis;
    const int self = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    if (mid > begin) nodes_[self].left = build(order, begin, mid);
    if (mid + 1 < end) nodes_[self].right = build(order, mid + 1, end);
    return self;
  }

  int pick_axis(const std::vector<int>& order, int begin, int end) const {
    Eigen::Vector2d lo = points_[order[begin]], hi = lo;
    for (int i = begin + 1; i < end; ++i) {
      lo = lo.cwiseMin(points_[order[i]]);
      hi = hi.cwiseMax(points_[order[i]]);
    }
    return (hi - lo).x() >= (hi - lo).y() ? 0 : 1;
  }

  void search(int node_id, const Eigen::Vector2d& query, Heap& heap) const {
    if (node_id < 0) return;
    const Node& node = nodes_[node_id];
    heap.offer({node.point, (points_[node.point] - query).squaredNorm()});

    const double delta = query[node.axis] - points_[node.point][node.axis];
    const int near = delta < 0.0 ? node.left : node.right;
    const int far = delta < 0.0 ? node.right : node.left;
    search(near, query, heap);
    // Equal plane distance must still recurse: an equally distant point with
    // a smaller index on the far side outranks the current worst.
    if (!heap.full() || delta * delta <= heap.worst().dist_sq) {
      search(far, query, heap);
    }
  }

  std::vector<Eigen::Vector2d> points_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace xcal
