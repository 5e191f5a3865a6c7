#include "cpt/alloc.hpp"
#include "cpt/cli.hpp"

int main(int argc, char** argv) {
  cpt::tune_allocator();
  return cpt::cli::run(argc, argv);
}
