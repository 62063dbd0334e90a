#include "mrglmm/cli.hpp"

int main(int argc, char** argv) {
  return mrglmm::cli::run(std::vector<std::string>(argv, argv + argc));
}
