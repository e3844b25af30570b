#include "elgan/networks.hpp"

namespace elgan {

template class Generator<float>;
template class Generator<double>;
template class Discriminator<float>;
template class Discriminator<double>;

}  // namespace elgan
