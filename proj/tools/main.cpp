#include "commands.hpp"

int main(int argc, char** argv) {
    return qlm::cli::run(argc, argv);
}
