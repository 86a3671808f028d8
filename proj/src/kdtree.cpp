#include <algorithm>
#include <numeric>
#include <queue>
#include <stdexcept>

#include "killshape/geometry.hpp"

namespace killshape {

namespace {
constexpr int kLeafSize = 16;
}

KdTree::KdTree(std::vector<Vec3> points) : pts_(std::move(points)) {
  if (pts_.empty()) throw std::invalid_argument("kd-tree over empty point set");
  order_.resize(pts_.size());
  std::iota(order_.begin(), order_.end(), 0);
  nodes_.reserve(pts_.size() / kLeafSize * 2 + 4);
  root_ = build(0, static_cast<int>(pts_.size()));
}

int KdTree::build(int begin, int end) {
  const int id = static_cast<int>(nodes_.size());
  Node n;
  n.begin = begin;
  n.end = end;
  nodes_.push_back(n);
  if (end - begin <= kLeafSize) return id;

  Vec3 lo = pts_[order_[begin]], hi = lo;
  for (int i = begin + 1; i < end; ++i) {
    lo = lo.cwiseMin(pts_[order_[i]]);
    hi = hi.cwiseMax(pts_[order_[i]]);
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);

  const int mid = (begin + end) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](int a, int b) { return pts_[a][axis] < pts_[b][axis]; });
  const double split = pts_[order_[mid]][axis];

  const int left = build(begin, mid);
  const int right = build(mid, end);
  nodes_[id].axis = axis;
  nodes_[id].split = split;
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

template <class Visit>
void KdTree::search(int node, const Vec3& q, double& bound, Visit&& visit) const {
  const Node& n = nodes_[node];
  if (n.left < 0) {
    for (int i = n.begin; i < n.end; ++i) visit(order_[i]);
    return;
  }
  const double delta = q[n.axis] - n.split;
  const int near = delta < 0.0 ? n.left : n.right;
  const int far = delta < 0.0 ? n.right : n.left;
  search(near, q, bound, visit);
  if (delta * delta <= bound) search(far, q, bound, visit);
}

KdTree::Hit KdTree::nearest(const Vec3& q) const {
  Hit best;
  double b2 = std::numeric_limits<double>::infinity();
  search(root_, q, b2, [&](int idx) {
    const double d2 = (pts_[idx] - q).squaredNorm();
    if (d2 < b2) {
      b2 = d2;
      best.index = idx;
    }
  });
  best.dist = std::sqrt(b2);
  return best;
}

std::vector<KdTree::Hit> KdTree::knearest(const Vec3& q, int k, int skip_index) const {
  if (k <= 0) return {};
  std::priority_queue<std::pair<double, int>> heap;  // max by squared distance
  double b2 = std::numeric_limits<double>::infinity();
  search(root_, q, b2, [&](int idx) {
    if (idx == skip_index) return;
    const double d2 = (pts_[idx] - q).squaredNorm();
    if (static_cast<int>(heap.size()) < k) {
      heap.emplace(d2, idx);
      if (static_cast<int>(heap.size()) == k) b2 = heap.top().first;
    } else if (d2 < heap.top().first) {
      heap.pop();
      heap.emplace(d2, idx);
      b2 = heap.top().first;
    }
  });
  std::vector<Hit> hits(heap.size());
  for (int i = static_cast<int>(heap.size()) - 1; i >= 0; --i) {
    hits[i] = Hit{heap.top().second, std::sqrt(heap.top().first)};
    heap.pop();
  }
  return hits;
}

}  // namespace killshape
