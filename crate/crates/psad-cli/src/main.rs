fn main() {
    // filled in once the core crate lands
}
