fn main() {
    println!("prefixctl");
}
