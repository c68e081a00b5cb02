#include "zipcache/harness.hpp"

int main(int argc, char **argv) { return zipcache::cmd_main(argc, argv); }
