#include "elgan/ops.hpp"
#include <chrono>
#include <iostream>
#include "elgan/runtime.hpp"
using namespace elgan;
using clk = std::chrono::steady_clock;
double ms(clk::time_point a, clk::time_point b) { return std::chrono::duration<double, std::milli>(b - a).count(); }
Var sum(Graph<float>& g, Var x) {
  Tensor<float> out(Shape{1,1,1,1}); out.data()[0] = g.value(x).array().sum();
  return g.emit(std::move(out), true, [x](Graph<float>& g, Var self) { g.grad(x).array() += g.grad(self).data()[0]; });
}
int main(int argc, char** argv) {
  int cin = std::atoi(argv[1]), cout_ = std::atoi(argv[2]), hw = std::atoi(argv[3]), k = std::atoi(argv[4]);
  tune_allocator();
  int n = 8;
  ParameterSet<float> ps; auto wi = ps.add("w", Shape{cout_, cin, k, k}, true); auto bi = ps.add("b", Shape{1,1,1,cout_}, false);
  Rng r(1); for (Index i = 0; i < ps[wi].value.size(); ++i) ps[wi].value.data()[i] = r.normal()*0.1;
  Tensor<float> x(Shape{n, cin, hw, hw}); for (Index i = 0; i < x.size(); ++i) x.data()[i] = r.uniform();
  for (int rep = 0; rep < 3; ++rep) {
    Graph<float> g; Var xv = g.input(x, true);
    auto t0 = clk::now();
    Var o = ops::conv2d(g, xv, ps[wi], ps[bi], true);
    auto t1 = clk::now();
    Var s = sum(g, o);
    auto t2 = clk::now();
    g.backward(s);
    auto t3 = clk::now();
    double macs = double(n) * hw * hw * cin * k * k * cout_;
    Tensor<float> go(g.value(o).shape(), 1.0f);
    auto t4 = clk::now();
    ops::detail::weight_grad<float>(x, go, k, ps[wi].grad.data()); if (0) ops::detail::weight_grad_direct<float, 3>(x, go, ps[wi].grad.data());
    auto t5 = clk::now();
    std::cout << "wgrad " << 2 * macs / ms(t4, t5) / 1e6 << " GFLOPS  ";
    std::cout << "fwd " << ms(t0, t1) << " ms (" << 2 * macs / ms(t0, t1) / 1e6 << " GFLOPS) bwd " << ms(t2,t3) << " ms (" << 4 * macs / ms(t2, t3) / 1e6 << " GFLOPS)\n";
  }
}
