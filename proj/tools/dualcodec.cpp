// command-line front end: train / encode / decode / roundtrip / info
#include <cstdio>

#include "dualcodec/common.hpp"

int main(int argc, char** argv) {
  (void)argc;
  (void)argv;
  std::fprintf(stderr, "dualcodec: not wired up yet\n");
  return 2;
}
