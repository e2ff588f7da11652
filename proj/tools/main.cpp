// Placeholder until the pipeline modules land.
int main() { return 0; }
