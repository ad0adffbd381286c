#include <cstdio>

int main() {
    std::puts("smamba: subcommands not wired up yet");
    return 1;
}
