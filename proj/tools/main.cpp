#include <cstdio>

#include "dmf/version.hpp"

int main() {
  std::printf("%s\n", dmf::kCodeVersion);
  return 0;
}
