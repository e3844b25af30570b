#include "elgan/losses.hpp"
#include <chrono>
#include <iostream>
#include <sys/resource.h>
#include "elgan/runtime.hpp"
using namespace elgan;
int main(int argc, char** argv) {
  tune_allocator();
  int n = argc > 1 ? std::atoi(argv[1]) : 8;
  Generator<float> gen(GeneratorSpec::desk(), 1);
  Discriminator<float> disc(DiscriminatorSpec::desk(), 2);
  std::cout << "gen params " << gen.parameter_count() << " disc params " << disc.parameter_count() << "\n";
  Tensor<float> x(Shape{n, 3, 128, 128}), y(Shape{n, 2, 128, 128}, 0.5f);
  Rng r(3); for (Index i = 0; i < x.size(); ++i) x.data()[i] = r.uniform();
  LossSelection sel;
  for (int rep = 0; rep < 3; ++rep) {
    auto t0 = std::chrono::steady_clock::now();
    sel.lambda_adv = 0; auto v = generator_loss(x, y, gen, disc, sel, Mode::train, 7);
    auto t1 = std::chrono::steady_clock::now();
    sel.lambda_adv = 1; v = generator_loss(x, y, gen, disc, sel, Mode::train, 7);
    auto t2 = std::chrono::steady_clock::now();
    double d = discriminator_loss(x, y, gen, disc, sel);
    auto t3 = std::chrono::steady_clock::now();
    auto p = gen.predict(x);
    auto t4 = std::chrono::steady_clock::now();
    rusage ru; getrusage(RUSAGE_SELF, &ru); std::cout << "minflt " << ru.ru_minflt << " rss " << ru.ru_maxrss << " sys " << ru.ru_stime.tv_sec + ru.ru_stime.tv_usec*1e-6 << "\n";
    auto ms = [](auto a, auto b) { return std::chrono::duration<double, std::milli>(b - a).count(); };
    std::cout << "pretrain step " << ms(t0, t1) << " ms, gan gen step " << ms(t1, t2) << " ms, disc step " << ms(t2, t3) << " ms, predict " << ms(t3,t4) << " loss " << v.total << " " << d << "\n";
  }
}
