#include <iostream>

#include "bevfuse/runtime.hpp"
#include "cli.hpp"

int main(int argc, char** argv) {
  bevfuse::keep_heap_resident();
  return bevfuse::cli::run(argc, argv, std::cout, std::cerr);
}
