#include <iostream>

#include "effscale/cli.hpp"

int main(int argc, char** argv) {
  const auto res = effscale::cli::run(std::vector<std::string>(argv, argv + argc));
  std::cout << res.out;
  std::cerr << res.err;
  return res.exit_code;
}
